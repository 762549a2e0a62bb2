//! Toy time-sensitive multimodal emotion recognition pipeline.
//!
//! The pipeline encodes video frames with a small ViT, restricts patch
//! attention to facial micro-expression regions compiled from landmarks,
//! compresses frames with a timestamp-conditioned query transformer, windows
//! the token stream by utterance segments, and feeds the fused multimodal
//! sequence into a LoRA-adapted causal decoder trained with a language
//! modeling loss over the target answer. Everything runs from scratch on a
//! small reverse-mode autodiff tape so analytic gradients can be verified
//! against central finite differences.

pub mod audio;
pub mod autodiff;
pub mod config;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod params;
pub mod qformer;
pub mod text;
pub mod tokens;
pub mod video;

pub use error::{Error, Result};
