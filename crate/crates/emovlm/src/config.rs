//! Run configuration: every tunable default in one place, hashable and
//! loadable from TOML. Unknown keys are rejected.

use crate::error::{Error, Result};
use crate::text;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // Facial geometry.
    /// Square frame edge in pixels.
    pub image_size: usize,
    /// Patch edge in pixels; must divide `image_size`.
    pub patch_size: usize,
    /// Fraction of a patch's pixel centers that must fall inside a region
    /// polygon for the patch to belong to the region.
    pub region_threshold: f64,

    // Frame encoder.
    pub d_model: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    /// FFN hidden width as a multiple of `d_model`.
    pub ffn_mult: usize,

    // Query transformers.
    /// Learnable queries per Q-Former pass.
    pub n_queries: usize,
    pub qformer_blocks: usize,
    pub qformer_heads: usize,
    /// Maximum tokenized length of the timestamp condition text.
    pub max_condition_tokens: usize,
    /// Share weights between per-utterance and whole-video Q-Former passes.
    pub share_video_qformer: bool,

    // Language model.
    pub d_llm: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_enabled: bool,

    // Audio branch.
    /// Samples per audio chunk before the chunk projection.
    pub audio_chunk: usize,

    // Training.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Parameter groups the optimizer may update; everything else stays
    /// byte-identical across training.
    pub tuned_groups: Vec<String>,
    pub seed: u64,
    /// Keep all tape values in f64. Off by default; forced on for gradient
    /// checks, which need the headroom.
    pub fp64: bool,

    // Ablation toggles.
    /// Drop the masked local-attention stream; frames are represented by the
    /// normalized global stream alone.
    pub disable_local_attention: bool,
    /// Drop per-utterance windows; only the whole-video tokens remain.
    pub disable_utterance_windows: bool,

    // Synthetic scenes.
    pub frame_count: usize,
    /// Seconds between consecutive frames.
    pub frame_interval_s: f64,
    pub with_audio: bool,
    pub audio_sample_rate: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image_size: 32,
            patch_size: 8,
            region_threshold: 0.25,
            d_model: 64,
            encoder_layers: 2,
            encoder_heads: 4,
            ffn_mult: 2,
            n_queries: 32,
            qformer_blocks: 2,
            qformer_heads: 4,
            max_condition_tokens: 16,
            share_video_qformer: true,
            d_llm: 128,
            lm_layers: 2,
            lm_heads: 4,
            vocab_size: 512,
            context_len: 512,
            lora_rank: 4,
            lora_alpha: 8.0,
            lora_enabled: true,
            audio_chunk: 256,
            epochs: 3,
            batch_size: 1,
            learning_rate: 0.05,
            momentum: 0.9,
            tuned_groups: crate::params::ParamGroup::DEFAULT_TUNED
                .iter()
                .map(|g| g.key().to_string())
                .collect(),
            seed: 0,
            fp64: false,
            disable_local_attention: false,
            disable_utterance_windows: false,
            frame_count: 6,
            frame_interval_s: 1.0,
            with_audio: true,
            audio_sample_rate: 800,
        }
    }
}

impl RunConfig {
    /// Small shapes for finite-difference runs; every path stays exercised.
    pub fn grad_check_defaults() -> Self {
        RunConfig {
            image_size: 16,
            patch_size: 8,
            d_model: 16,
            encoder_layers: 1,
            encoder_heads: 2,
            ffn_mult: 2,
            n_queries: 4,
            qformer_blocks: 1,
            qformer_heads: 2,
            max_condition_tokens: 16,
            d_llm: 24,
            lm_layers: 1,
            lm_heads: 2,
            vocab_size: text::vocab_size(),
            context_len: 128,
            lora_rank: 2,
            audio_chunk: 64,
            frame_count: 2,
            frame_interval_s: 1.0,
            audio_sample_rate: 200,
            fp64: true,
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.image_size == 0 || self.patch_size == 0 {
            return bad("image_size and patch_size must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return bad(format!(
                "patch_size {} must divide image_size {}",
                self.patch_size, self.image_size
            ));
        }
        if !(self.region_threshold > 0.0 && self.region_threshold <= 1.0) {
            return bad(format!(
                "region_threshold {} must lie in (0, 1]",
                self.region_threshold
            ));
        }
        if self.d_model % self.encoder_heads != 0 {
            return bad(format!(
                "encoder_heads {} must divide d_model {}",
                self.encoder_heads, self.d_model
            ));
        }
        if self.d_model % self.qformer_heads != 0 {
            return bad(format!(
                "qformer_heads {} must divide d_model {}",
                self.qformer_heads, self.d_model
            ));
        }
        if self.d_llm % self.lm_heads != 0 {
            return bad(format!(
                "lm_heads {} must divide d_llm {}",
                self.lm_heads, self.d_llm
            ));
        }
        if self.n_queries == 0 {
            return bad("n_queries must be at least 1".into());
        }
        if self.vocab_size < text::vocab_size() {
            return bad(format!(
                "vocab_size {} is smaller than the tokenizer vocabulary {}",
                self.vocab_size,
                text::vocab_size()
            ));
        }
        if self.lora_rank == 0 {
            return bad("lora_rank must be at least 1".into());
        }
        if self.audio_chunk == 0 {
            return bad("audio_chunk must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.frame_count == 0 {
            return bad("frame_count must be at least 1".into());
        }
        if !(self.frame_interval_s > 0.0) {
            return bad("frame_interval_s must be positive".into());
        }
        for key in &self.tuned_groups {
            crate::params::ParamGroup::from_key(key)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig =
            toml::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical JSON serialization; recorded in every
    /// report so runs are traceable to their exact configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Apply a comma-separated ablation list from the CLI.
    pub fn apply_ablations(&mut self, keys: &str) -> Result<()> {
        for key in keys.split(',').map(str::trim).filter(|k| !k.is_empty()) {
            match key {
                "disable_local_attention" => self.disable_local_attention = true,
                "disable_utterance_windows" => self.disable_utterance_windows = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation key `{other}` (expected disable_local_attention or disable_utterance_windows)"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }
}
