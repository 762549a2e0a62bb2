//! Toy causal decoder with low-rank adapters, multimodal sequence assembly,
//! and the answer language-modeling loss.
//!
//! The decoder is a standard pre-norm causal transformer (`lm.*`, frozen).
//! Every attention and feed-forward linear map carries a LoRA delta
//! (`lora.*`, tuned); with adapter `b` matrices at zero the decoder output
//! equals the frozen base bit for bit. The loss is the mean negative
//! log-likelihood of the answer tokens under teacher forcing; prompt and
//! modality positions contribute nothing.

use crate::autodiff::{Graph, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{self, LoraHook};
use crate::params::{randn, ParamStore};
use crate::tokens::{Provenance, TokenSeq};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Low-rank delta attached to a frozen linear map:
/// `delta(x) = (alpha / r) * B (A x)`, so `B = 0` makes the delta vanish.
#[derive(Clone, Debug)]
pub struct LoRAAdapter {
    /// `[r, d_in]`
    pub a: Array2<f64>,
    /// `[d_out, r]`
    pub b: Array2<f64>,
    pub rank: usize,
    pub alpha: f64,
    pub enabled: bool,
}

impl LoRAAdapter {
    /// Delta for row-vector tokens `x: [n, d_in]` -> `[n, d_out]`.
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        if !self.enabled {
            return Array2::zeros((x.nrows(), self.b.nrows()));
        }
        let scale = self.alpha / self.rank as f64;
        x.dot(&self.a.t()).dot(&self.b.t()) * scale
    }

    /// The equivalent dense weight in input-major storage:
    /// `W_delta = (alpha / r) * (B A)^T`, used by the folding oracle.
    pub fn folded_weight(&self) -> Array2<f64> {
        let scale = self.alpha / self.rank as f64;
        self.b.dot(&self.a).t().to_owned() * scale
    }
}

/// The six adapted linear maps per decoder layer.
const LORA_LEAVES: [(&str, &str); 6] = [
    ("attn", "wq"),
    ("attn", "wk"),
    ("attn", "wv"),
    ("attn", "wo"),
    ("ffn", "w1"),
    ("ffn", "w2"),
];

pub fn init_lm(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &RunConfig) {
    let d = cfg.d_llm;
    store.insert("lm.embed", randn(rng, cfg.vocab_size, d, 0.02));
    store.insert("lm.pos", randn(rng, cfg.context_len, d, 0.02));
    let hidden = d * cfg.ffn_mult;
    for l in 0..cfg.lm_layers {
        let p = format!("lm.l{l}");
        nn::init_layer_norm(store, &format!("{p}.ln1"), d);
        nn::init_mha(store, rng, &format!("{p}.attn"), d, true);
        nn::init_layer_norm(store, &format!("{p}.ln2"), d);
        nn::init_ffn(store, rng, &format!("{p}.ffn"), d, hidden);
        for (module, leaf) in LORA_LEAVES {
            let (d_in, d_out) = match (module, leaf) {
                ("ffn", "w1") => (d, hidden),
                ("ffn", "w2") => (hidden, d),
                _ => (d, d),
            };
            nn::init_lora(
                store,
                rng,
                &format!("lora.l{l}.{module}.{leaf}"),
                d_in,
                d_out,
                cfg.lora_rank,
            );
        }
    }
    nn::init_layer_norm(store, "lm.ln_f", d);
    nn::init_linear(store, rng, "lm.head.w", "lm.head.b", d, cfg.vocab_size);
}

/// Embed token ids with the frozen embedding table.
pub fn embed_ids(g: &mut Graph, store: &ParamStore, cfg: &RunConfig, ids: &[usize]) -> Result<Var> {
    if let Some(&bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let table = store.bind(g, "lm.embed");
    Ok(g.gather_rows(table, ids))
}

/// Multimodal sequence assembly: `[T_V; T_A; T_Lq; T_La]` with an answer
/// mask that is true exactly on the answer positions (the tail).
pub struct MultimodalSequence {
    pub embeddings: Var,
    /// Per-position flag, true on answer (T_La) positions.
    pub answer_mask: Vec<bool>,
    pub answer_ids: Vec<usize>,
}

pub fn concat_multimodal(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    t_v: &TokenSeq,
    t_a: Option<&TokenSeq>,
    instruction_ids: &[usize],
    answer_ids: &[usize],
) -> Result<MultimodalSequence> {
    let mut parts: Vec<Var> = Vec::new();
    for (label, seq) in [("T_V", Some(t_v)), ("T_A", t_a)] {
        if let Some(s) = seq {
            if s.width != cfg.d_llm {
                return Err(Error::Shape {
                    context: format!("concat_multimodal {label}"),
                    expected: format!("width {}", cfg.d_llm),
                    got: format!("width {}", s.width),
                });
            }
            if !s.is_empty() {
                parts.push(s.node);
            }
        }
    }
    let n_prefix = t_v.rows + t_a.map(|a| a.rows).unwrap_or(0);
    if !instruction_ids.is_empty() {
        parts.push(embed_ids(g, store, cfg, instruction_ids)?);
    }
    if !answer_ids.is_empty() {
        parts.push(embed_ids(g, store, cfg, answer_ids)?);
    }
    if parts.is_empty() {
        return Err(Error::Input("concat_multimodal: empty sequence".into()));
    }
    let embeddings = g.concat_rows(&parts);
    let total = n_prefix + instruction_ids.len() + answer_ids.len();
    debug_assert_eq!(g.shape(embeddings).0, total);
    let mut answer_mask = vec![false; total];
    for slot in answer_mask.iter_mut().skip(total - answer_ids.len()) {
        *slot = true;
    }
    Ok(MultimodalSequence {
        embeddings,
        answer_mask,
        answer_ids: answer_ids.to_vec(),
    })
}

/// Causal decoder over pre-assembled embeddings: learned positions, pre-norm
/// blocks with causal masking and LoRA deltas on every linear map, final
/// norm, output head. Row `t` of the logits depends only on positions `<= t`.
pub fn lm_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    embeddings: Var,
    lora_enabled: bool,
) -> Result<Var> {
    let (n, width) = g.shape(embeddings);
    if width != cfg.d_llm {
        return Err(Error::Shape {
            context: "lm_forward".into(),
            expected: format!("width {}", cfg.d_llm),
            got: format!("width {width}"),
        });
    }
    if n == 0 {
        return Err(Error::Input("lm_forward: empty sequence".into()));
    }
    if n > cfg.context_len {
        return Err(Error::Input(format!(
            "sequence length {n} exceeds context {}",
            cfg.context_len
        )));
    }
    let pos_table = store.bind(g, "lm.pos");
    let pos = g.slice_rows(pos_table, 0, n);
    let mut x = g.add(embeddings, pos);

    let causal = Arc::new(Array2::from_shape_fn((n, n), |(i, j)| j <= i));
    for l in 0..cfg.lm_layers {
        let p = format!("lm.l{l}");
        let hook = |module: &str| {
            lora_enabled.then(|| LoraHook {
                prefix: format!("lora.l{l}.{module}"),
                alpha: cfg.lora_alpha,
                rank: cfg.lora_rank,
            })
        };
        let xn = nn::layer_norm(g, store, x, &format!("{p}.ln1"));
        let attn = nn::mha(
            g,
            store,
            &format!("{p}.attn"),
            xn,
            xn,
            cfg.lm_heads,
            Some(causal.clone()),
            true,
            hook("attn").as_ref(),
        );
        x = g.add(x, attn);
        let xn = nn::layer_norm(g, store, x, &format!("{p}.ln2"));
        let f = nn::ffn(g, store, &format!("{p}.ffn"), xn, hook("ffn").as_ref());
        x = g.add(x, f);
        if !g.is_finite(x) {
            return Err(Error::Numeric(format!("decoder layer {l}")));
        }
    }
    let xn = nn::layer_norm(g, store, x, "lm.ln_f");
    Ok(nn::linear(g, store, xn, "lm.head.w", "lm.head.b", None))
}

/// Loss over the answer span.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub n_answer_tokens: usize,
}

/// Mean negative log-softmax of the true answer ids over the scored logit
/// rows: `scored_rows[i]` marks the rows that predict answer tokens (for a
/// tail answer span starting at position `a`, rows `a-1 .. a+m-2`). Rows
/// outside the mask cannot influence the value.
pub fn eq1_loss(
    g: &mut Graph,
    logits: Var,
    answer_ids: &[usize],
    scored_rows: &[bool],
) -> Result<(Var, LossValue)> {
    let (n, vocab) = g.shape(logits);
    if scored_rows.len() != n {
        return Err(Error::Shape {
            context: "eq1_loss mask".into(),
            expected: format!("{n} flags"),
            got: format!("{}", scored_rows.len()),
        });
    }
    let m = scored_rows.iter().filter(|&&b| b).count();
    if m == 0 || answer_ids.is_empty() {
        return Err(Error::Input("eq1_loss: empty answer span".into()));
    }
    if m != answer_ids.len() {
        return Err(Error::Input(format!(
            "eq1_loss: {m} scored rows for {} answer tokens",
            answer_ids.len()
        )));
    }
    if let Some(&bad) = answer_ids.iter().find(|&&id| id >= vocab) {
        return Err(Error::Input(format!("answer id {bad} outside vocab {vocab}")));
    }
    // per-row targets; unscored rows point at column 0 and are zeroed below
    let mut targets = vec![0usize; n];
    let mut next = 0usize;
    for (i, &scored) in scored_rows.iter().enumerate() {
        if scored {
            targets[i] = answer_ids[next];
            next += 1;
        }
    }
    let lse = g.logsumexp_rows(logits);
    let picked = g.select_per_row(logits, &targets);
    let neg_picked = g.scale(picked, -1.0);
    let per_row = g.add(lse, neg_picked);
    let mask_col = Array2::from_shape_fn((n, 1), |(i, _)| if scored_rows[i] { 1.0 } else { 0.0 });
    let mask = g.input(mask_col);
    let masked = g.mul(per_row, mask);
    let total = g.sum_all(masked);
    let mean = g.scale(total, 1.0 / m as f64);

    let raw = g.value(mean)[[0, 0]];
    if !raw.is_finite() {
        return Err(Error::Numeric("eq1_loss".into()));
    }
    Ok((
        mean,
        LossValue {
            value: raw.max(0.0), // rounding guard
            n_answer_tokens: m,
        },
    ))
}

/// Greedy decoding demo: extend the prompt embeddings token by token until
/// a period or the budget. Not part of the training contract.
pub fn greedy_decode(
    store: &ParamStore,
    cfg: &RunConfig,
    prompt_embeddings: Array2<f64>,
    max_new: usize,
) -> Result<Vec<usize>> {
    use crate::autodiff::Precision;
    let stop = crate::text::encode(".");
    let stop_id = stop.first().copied();
    let embed = store.get("lm.embed").clone();
    let mut rows = prompt_embeddings;
    let mut out = Vec::new();
    for _ in 0..max_new {
        let mut g = Graph::new(if cfg.fp64 {
            Precision::Double
        } else {
            Precision::Single
        });
        let v = g.input(rows.clone());
        let logits = lm_forward(&mut g, store, cfg, v, cfg.lora_enabled)?;
        let last = g.value(logits).row(g.shape(logits).0 - 1).to_owned();
        let id = last
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .expect("non-empty vocabulary");
        out.push(id);
        if Some(id) == stop_id {
            break;
        }
        let mut grown = Array2::zeros((rows.nrows() + 1, rows.ncols()));
        grown.slice_mut(ndarray::s![..rows.nrows(), ..]).assign(&rows);
        grown.row_mut(rows.nrows()).assign(&embed.row(id));
        rows = grown;
    }
    Ok(out)
}
