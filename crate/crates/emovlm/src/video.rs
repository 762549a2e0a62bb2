//! Utterance-aware temporal windowing and the video Q-Former.
//!
//! Each utterance segment defines a window over the frames whose timestamps
//! fall in `[start, end)`; a GLOBAL window always covers every frame, so the
//! pipeline stays effective with minimal or no dialogue. The (by default
//! shared) video Q-Former compresses each non-empty window and the whole
//! video into `n_queries` tokens; the blocks are concatenated window-first,
//! global-last into the multi-scale token sequence, then an affine map takes
//! them to the language model width.
//!
//! Weights are stored input-major: `y = x . W + b`.

use crate::autodiff::{Graph, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::ParamStore;
use crate::qformer;
use crate::tokens::{Provenance, TokenSeq};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One speech interval with its transcript.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceSegment {
    pub start_s: f64,
    pub end_s: f64,
    pub transcript: String,
}

impl UtteranceSegment {
    pub fn new(start_s: f64, end_s: f64, transcript: impl Into<String>) -> Result<Self> {
        if !(start_s >= 0.0 && start_s < end_s) {
            return Err(Error::Data(format!(
                "utterance interval [{start_s}, {end_s}) is invalid"
            )));
        }
        Ok(UtteranceSegment {
            start_s,
            end_s,
            transcript: transcript.into(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        UtteranceSegment::new(self.start_s, self.end_s, "").map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WindowKind {
    /// Index into the utterance list.
    Utterance(usize),
    Global,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub kind: WindowKind,
    pub frames: Vec<usize>,
}

/// Utterance windows ordered by segment start, then the GLOBAL window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowAssignment {
    pub windows: Vec<Window>,
}

impl WindowAssignment {
    pub fn global(&self) -> &Window {
        self.windows
            .last()
            .expect("assignment always carries a GLOBAL window")
    }

    pub fn utterance_windows(&self) -> impl Iterator<Item = &Window> {
        self.windows
            .iter()
            .filter(|w| w.kind != WindowKind::Global)
    }

    pub fn non_empty_utterance_windows(&self) -> usize {
        self.utterance_windows()
            .filter(|w| !w.frames.is_empty())
            .count()
    }
}

/// Assign frames to one window per utterance (`t` in `[start, end)`) plus
/// the GLOBAL window holding every frame. Empty utterance windows are
/// retained; overlapping utterances may share frames.
pub fn build_windows(
    utterances: &[UtteranceSegment],
    frame_times: &[f64],
) -> Result<WindowAssignment> {
    for u in utterances {
        u.validate()?;
    }
    if frame_times.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Data("frame times must be non-decreasing".into()));
    }
    let mut order: Vec<usize> = (0..utterances.len()).collect();
    order.sort_by(|&a, &b| {
        utterances[a]
            .start_s
            .partial_cmp(&utterances[b].start_s)
            .expect("finite start times")
            .then(a.cmp(&b))
    });
    let mut windows: Vec<Window> = order
        .into_iter()
        .map(|segment| {
            let u = &utterances[segment];
            Window {
                kind: WindowKind::Utterance(segment),
                frames: frame_times
                    .iter()
                    .enumerate()
                    .filter(|(_, &t)| t >= u.start_s && t < u.end_s)
                    .map(|(i, _)| i)
                    .collect(),
            }
        })
        .collect();
    windows.push(Window {
        kind: WindowKind::Global,
        frames: (0..frame_times.len()).collect(),
    });
    Ok(WindowAssignment { windows })
}

fn video_qformer_prefix(cfg: &RunConfig, global: bool) -> &'static str {
    if cfg.share_video_qformer {
        "vid_qf.shared"
    } else if global {
        "vid_qf.glob"
    } else {
        "vid_qf.win"
    }
}

pub fn init_video_qformer(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &RunConfig) {
    if cfg.share_video_qformer {
        qformer::init_qformer(store, rng, "vid_qf.shared", cfg, false);
    } else {
        qformer::init_qformer(store, rng, "vid_qf.win", cfg, false);
        qformer::init_qformer(store, rng, "vid_qf.glob", cfg, false);
    }
}

fn check_frame_tokens(cfg: &RunConfig, frame_tokens: &[TokenSeq]) -> Result<()> {
    for (i, t) in frame_tokens.iter().enumerate() {
        if t.provenance != Provenance::FrameFused {
            return Err(Error::Input(format!(
                "frame {i} tokens carry provenance {:?}, expected frame_fused",
                t.provenance
            )));
        }
        if t.width != cfg.d_model {
            return Err(Error::Shape {
                context: "video q-former frame tokens".into(),
                expected: format!("width {}", cfg.d_model),
                got: format!("width {}", t.width),
            });
        }
    }
    Ok(())
}

/// Run the video Q-Former over each non-empty utterance window. The window's
/// frames contribute their fused tokens in temporal order as the key/value
/// sequence. Empty windows are skipped (logged) and produce no tokens.
pub fn window_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    assignment: &WindowAssignment,
    frame_tokens: &[TokenSeq],
) -> Result<Vec<TokenSeq>> {
    if assignment.global().frames.len() != frame_tokens.len() {
        return Err(Error::Shape {
            context: "window_forward".into(),
            expected: format!("{} frame token sequences", assignment.global().frames.len()),
            got: format!("{}", frame_tokens.len()),
        });
    }
    check_frame_tokens(cfg, frame_tokens)?;
    let prefix = video_qformer_prefix(cfg, false);
    let mut out = Vec::new();
    for window in assignment.utterance_windows() {
        if window.frames.is_empty() {
            log::debug!("skipping empty utterance window {:?}", window.kind);
            continue;
        }
        let parts: Vec<Var> = window.frames.iter().map(|&f| frame_tokens[f].node).collect();
        let kv = g.concat_rows(&parts);
        let tokens = qformer::qformer_pass(g, store, prefix, cfg, kv, None)?;
        out.push(TokenSeq::new(g, tokens, Provenance::Window));
    }
    Ok(out)
}

/// Whole-video pass: every frame's fused tokens feed one Q-Former run.
pub fn global_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    frame_tokens: &[TokenSeq],
) -> Result<TokenSeq> {
    if frame_tokens.is_empty() {
        return Err(Error::Input("global_forward needs at least one frame".into()));
    }
    check_frame_tokens(cfg, frame_tokens)?;
    let parts: Vec<Var> = frame_tokens.iter().map(|t| t.node).collect();
    let kv = g.concat_rows(&parts);
    let prefix = video_qformer_prefix(cfg, true);
    let tokens = qformer::qformer_pass(g, store, prefix, cfg, kv, None)?;
    Ok(TokenSeq::new(g, tokens, Provenance::VideoGlobal))
}

/// Concatenate window token blocks (already in temporal order) and the
/// global block into the multi-scale sequence. With no windows the global
/// tokens pass through unchanged. The combined sequence keeps the
/// video-level tag.
pub fn multiscale_fuse(
    g: &mut Graph,
    window_tokens: &[TokenSeq],
    global_tokens: &TokenSeq,
) -> Result<TokenSeq> {
    for (i, w) in window_tokens.iter().enumerate() {
        if w.provenance != Provenance::Window {
            return Err(Error::Input(format!(
                "multiscale_fuse window block {i} carries {:?}",
                w.provenance
            )));
        }
    }
    if global_tokens.provenance != Provenance::VideoGlobal {
        return Err(Error::Input(format!(
            "multiscale_fuse global block carries {:?}",
            global_tokens.provenance
        )));
    }
    if window_tokens.is_empty() {
        return Ok(*global_tokens);
    }
    let mut parts: Vec<Var> = window_tokens.iter().map(|t| t.node).collect();
    parts.push(global_tokens.node);
    let fused = g.concat_rows(&parts);
    Ok(TokenSeq::new(g, fused, Provenance::VideoGlobal))
}

/// Affine map from model width to language-model width; token order and
/// provenance are preserved.
pub fn project_to_llm(
    g: &mut Graph,
    store: &ParamStore,
    tokens: &TokenSeq,
    proj_prefix: &str,
) -> Result<TokenSeq> {
    let w_name = format!("{proj_prefix}.w");
    let (d_in, _) = {
        let w = store.get(&w_name);
        (w.nrows(), w.ncols())
    };
    if tokens.width != d_in {
        return Err(Error::Shape {
            context: "project_to_llm".into(),
            expected: format!("token width {d_in}"),
            got: format!("token width {}", tokens.width),
        });
    }
    let projected = nn::linear(
        g,
        store,
        tokens.node,
        &w_name,
        &format!("{proj_prefix}.b"),
        None,
    );
    Ok(TokenSeq::new(g, projected, tokens.provenance))
}
