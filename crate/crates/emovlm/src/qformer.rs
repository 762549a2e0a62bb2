//! Query transformers: a fixed bank of learnable queries cross-attends to a
//! variable-length feature sequence and emits a fixed number of tokens.
//!
//! One generic pass serves three instantiations: the image Q-Former
//! (`img_qf.*`, conditioned on timestamp text), the video Q-Former
//! (`vid_qf.*`) and the audio Q-Former (`audio_qf.*`). Each block runs
//! self-attention over `[condition; queries]` (only query positions are kept;
//! condition embeddings stay fixed across blocks), cross-attention from the
//! queries to the key/value sequence, and a feed-forward, all pre-norm with
//! residuals. There is no terminal norm, so zero blocks return the query
//! bank unchanged.
//!
//! The same image Q-Former weights serve the global frame stream and the
//! masked local stream; the two compressed streams are then fused by
//! feature-axis concatenation, a learned linear map back to model width, and
//! layer normalization.

use crate::autodiff::{Graph, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{randn, ParamStore};
use crate::text;
use crate::tokens::{Provenance, TokenSeq};
use rand_chacha::ChaCha8Rng;

/// Timestamp condition text with its tokenization.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionText {
    pub text: String,
    pub token_ids: Vec<usize>,
}

/// Render the frame timestamp to one decimal place in the fixed template.
pub fn format_timestamp(t_s: f64) -> Result<ConditionText> {
    if !(t_s >= 0.0) {
        return Err(Error::Input(format!("timestamp {t_s}s must be non-negative")));
    }
    let text = format!("This frame is sampled at {t_s:.1}s.");
    let token_ids = text::encode(&text);
    Ok(ConditionText { text, token_ids })
}

/// Initialize one Q-Former under `prefix`. `text_condition` adds the token
/// embedding and positional tables used by the image Q-Former.
pub fn init_qformer(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &RunConfig,
    text_condition: bool,
) {
    let d = cfg.d_model;
    store.insert(format!("{prefix}.queries"), randn(rng, cfg.n_queries, d, 0.02));
    if text_condition {
        store.insert(
            format!("{prefix}.text_embed"),
            randn(rng, cfg.vocab_size, d, 0.02),
        );
        store.insert(
            format!("{prefix}.text_pos"),
            randn(rng, cfg.max_condition_tokens, d, 0.02),
        );
    }
    for b in 0..cfg.qformer_blocks {
        let p = format!("{prefix}.b{b}");
        nn::init_layer_norm(store, &format!("{p}.ln1"), d);
        nn::init_mha(store, rng, &format!("{p}.self"), d, true);
        nn::init_layer_norm(store, &format!("{p}.ln2"), d);
        nn::init_layer_norm(store, &format!("{p}.ln_kv"), d);
        nn::init_mha(store, rng, &format!("{p}.cross"), d, true);
        nn::init_layer_norm(store, &format!("{p}.ln3"), d);
        nn::init_ffn(store, rng, &format!("{p}.ffn"), d, d * cfg.ffn_mult);
    }
}

pub fn init_image_qformer(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &RunConfig) {
    init_qformer(store, rng, "img_qf", cfg, true);
    let d = cfg.d_model;
    nn::init_linear(store, rng, "img_qf.fuse.w", "img_qf.fuse.b", 2 * d, d);
    nn::init_layer_norm(store, "img_qf.fuse.ln", d);
}

/// Embed condition token ids with the image Q-Former's text tables.
pub fn embed_condition(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    cond: &ConditionText,
) -> Result<Var> {
    let n = cond.token_ids.len();
    if n == 0 {
        return Err(Error::Input("empty condition text".into()));
    }
    if n > cfg.max_condition_tokens {
        return Err(Error::Input(format!(
            "condition `{}` tokenizes to {n} tokens, budget {}",
            cond.text, cfg.max_condition_tokens
        )));
    }
    if let Some(&bad) = cond.token_ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "condition token id {bad} out of vocabulary range {}",
            cfg.vocab_size
        )));
    }
    let table = store.bind(g, "img_qf.text_embed");
    let emb = g.gather_rows(table, &cond.token_ids);
    let pos_table = store.bind(g, "img_qf.text_pos");
    let pos = g.slice_rows(pos_table, 0, n);
    Ok(g.add(emb, pos))
}

/// Generic Q-Former pass: the bank under `<prefix>.queries` updated by
/// `blocks` rounds of self-attention over `[cond; queries]`, cross-attention
/// to `kv`, and feed-forward. Output always has exactly `n_queries` rows.
pub fn qformer_pass(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &RunConfig,
    kv: Var,
    cond: Option<Var>,
) -> Result<Var> {
    let (n_kv, kv_width) = g.shape(kv);
    if n_kv == 0 {
        return Err(Error::Input(format!("{prefix}: empty key/value sequence")));
    }
    if kv_width != cfg.d_model {
        return Err(Error::Shape {
            context: format!("{prefix} kv"),
            expected: format!("width {}", cfg.d_model),
            got: format!("width {kv_width}"),
        });
    }
    let n_cond = cond.map(|c| g.shape(c).0).unwrap_or(0);
    let mut q = store.bind(g, &format!("{prefix}.queries"));
    for b in 0..cfg.qformer_blocks {
        let p = format!("{prefix}.b{b}");
        // self-attention over the condition-prefixed bank
        let z = match cond {
            Some(c) => g.concat_rows(&[c, q]),
            None => q,
        };
        let zn = nn::layer_norm(g, store, z, &format!("{p}.ln1"));
        let qn = if n_cond > 0 {
            g.slice_rows(zn, n_cond, cfg.n_queries)
        } else {
            zn
        };
        let attn = nn::mha(
            g,
            store,
            &format!("{p}.self"),
            qn,
            zn,
            cfg.qformer_heads,
            None,
            true,
            None,
        );
        q = g.add(q, attn);
        // cross-attention from queries to the feature sequence
        let qn = nn::layer_norm(g, store, q, &format!("{p}.ln2"));
        let kvn = nn::layer_norm(g, store, kv, &format!("{p}.ln_kv"));
        let cross = nn::mha(
            g,
            store,
            &format!("{p}.cross"),
            qn,
            kvn,
            cfg.qformer_heads,
            None,
            true,
            None,
        );
        q = g.add(q, cross);
        let qn = nn::layer_norm(g, store, q, &format!("{p}.ln3"));
        let f = nn::ffn(g, store, &format!("{p}.ffn"), qn, None);
        q = g.add(q, f);
        if !g.is_finite(q) {
            return Err(Error::Numeric(format!("{prefix} block {b}")));
        }
    }
    Ok(q)
}

/// Timestamp-conditioned image Q-Former over one frame stream.
pub fn image_qformer_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    kv: Var,
    cond: &ConditionText,
    provenance: Provenance,
) -> Result<TokenSeq> {
    let cond_emb = embed_condition(g, store, cfg, cond)?;
    let out = qformer_pass(g, store, "img_qf", cfg, kv, Some(cond_emb))?;
    Ok(TokenSeq::new(g, out, provenance))
}

/// Fuse the compressed global and local streams: feature-axis concatenation,
/// learned linear back to model width, layer norm.
pub fn fuse_global_local(
    g: &mut Graph,
    store: &ParamStore,
    global: &TokenSeq,
    local: &TokenSeq,
) -> Result<TokenSeq> {
    if global.provenance != Provenance::FrameGlobal || local.provenance != Provenance::FrameLocal {
        return Err(Error::Input(format!(
            "fuse_global_local wants (frame_global, frame_local), got ({:?}, {:?})",
            global.provenance, local.provenance
        )));
    }
    if global.rows != local.rows || global.width != local.width {
        return Err(Error::Shape {
            context: "fuse_global_local".into(),
            expected: format!("{}x{} for both streams", global.rows, global.width),
            got: format!("{}x{}", local.rows, local.width),
        });
    }
    let cat = g.concat_cols(&[global.node, local.node]);
    let mixed = nn::linear(g, store, cat, "img_qf.fuse.w", "img_qf.fuse.b", None);
    let fused = nn::layer_norm(g, store, mixed, "img_qf.fuse.ln");
    Ok(TokenSeq::new(g, fused, Provenance::FrameFused))
}

/// Ablation path without the local stream: the global tokens pass through
/// the fusion layer norm alone, matching the block-identity construction of
/// [`fuse_global_local`] with a zeroed local stream.
pub fn fuse_global_only(
    g: &mut Graph,
    store: &ParamStore,
    global: &TokenSeq,
) -> Result<TokenSeq> {
    if global.provenance != Provenance::FrameGlobal {
        return Err(Error::Input(format!(
            "fuse_global_only wants frame_global, got {:?}",
            global.provenance
        )));
    }
    let fused = nn::layer_norm(g, store, global.node, "img_qf.fuse.ln");
    Ok(TokenSeq::new(g, fused, Provenance::FrameFused))
}
