//! Shared layers over the autodiff tape: affine maps (optionally with a
//! low-rank adapter delta), affine layer norm, multi-head attention, and the
//! two-layer GELU feed-forward. All parameters are resolved from a
//! [`ParamStore`] by hierarchical name so the same code serves the frame
//! encoder, the query transformers, and the language model.

use crate::autodiff::{Graph, Var};
use crate::params::{randn, ParamStore};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

pub const LN_EPS: f64 = 1e-5;

/// Low-rank adapter attachment for a base linear map: parameter names
/// `<prefix>.a` (`[r, d_in]`) and `<prefix>.b` (`[d_out, r]`), applied as
/// `y += (alpha / r) * x . a^T . b^T`.
#[derive(Clone, Debug)]
pub struct LoraHook {
    pub prefix: String,
    pub alpha: f64,
    pub rank: usize,
}

impl LoraHook {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// `y = x . W + b`, with W stored under `<prefix>.w`-style names passed
/// explicitly, plus an optional low-rank delta.
pub fn linear(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    w_name: &str,
    b_name: &str,
    lora: Option<&LoraHook>,
) -> Var {
    let w = store.bind(g, w_name);
    let b = store.bind(g, b_name);
    let y = g.matmul(x, w);
    let y = g.add_row(y, b);
    match lora {
        Some(hook) => {
            let a = store.bind(g, &format!("{}.a", hook.prefix));
            let bm = store.bind(g, &format!("{}.b", hook.prefix));
            let at = g.transpose(a);
            let bt = g.transpose(bm);
            let t = g.matmul(x, at);
            let d = g.matmul(t, bt);
            let d = g.scale(d, hook.scale());
            g.add(y, d)
        }
        None => y,
    }
}

/// Row-wise layer norm with learned gain `<prefix>.g` and bias `<prefix>.b`.
pub fn layer_norm(g: &mut Graph, store: &ParamStore, x: Var, prefix: &str) -> Var {
    let n = g.layer_norm(x, LN_EPS);
    let gain = store.bind(g, &format!("{prefix}.g"));
    let bias = store.bind(g, &format!("{prefix}.b"));
    let scaled = g.mul_row(n, gain);
    g.add_row(scaled, bias)
}

/// Multi-head attention with parameters under `<prefix>.{wq,bq,wk,bk,wv,bv}`
/// and, when `out_proj`, `<prefix>.{wo,bo}`. `mask` restricts each query row
/// to its permitted key columns; masked-out keys are excluded from the
/// softmax support entirely. Without `out_proj` the result is the raw
/// concatenation of per-head attention outputs (the value projection of the
/// attended tokens).
#[allow(clippy::too_many_arguments)]
pub fn mha(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    xq: Var,
    xkv: Var,
    heads: usize,
    mask: Option<Arc<Array2<bool>>>,
    out_proj: bool,
    lora: Option<&LoraHook>,
) -> Var {
    mha_with_probs(g, store, prefix, xq, xkv, heads, mask, out_proj, lora).0
}

/// [`mha`] that also returns the per-head attention probability matrices,
/// for invariant checks on the attention weights themselves.
#[allow(clippy::too_many_arguments)]
pub fn mha_with_probs(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    xq: Var,
    xkv: Var,
    heads: usize,
    mask: Option<Arc<Array2<bool>>>,
    out_proj: bool,
    lora: Option<&LoraHook>,
) -> (Var, Vec<Var>) {
    let (_, d) = g.shape(xq);
    assert_eq!(d % heads, 0, "heads must divide model width");
    let hook = |leaf: &str| {
        lora.map(|h| LoraHook {
            prefix: format!("{}.{leaf}", h.prefix),
            alpha: h.alpha,
            rank: h.rank,
        })
    };
    let q = linear(
        g,
        store,
        xq,
        &format!("{prefix}.wq"),
        &format!("{prefix}.bq"),
        hook("wq").as_ref(),
    );
    let k = linear(
        g,
        store,
        xkv,
        &format!("{prefix}.wk"),
        &format!("{prefix}.bk"),
        hook("wk").as_ref(),
    );
    let v = linear(
        g,
        store,
        xkv,
        &format!("{prefix}.wv"),
        &format!("{prefix}.bv"),
        hook("wv").as_ref(),
    );
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads_out = Vec::with_capacity(heads);
    let mut head_probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dk, dk);
        let kh = g.slice_cols(k, h * dk, dk);
        let vh = g.slice_cols(v, h * dk, dk);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, scale);
        let probs = g.softmax(scores, mask.clone());
        head_probs.push(probs);
        heads_out.push(g.matmul(probs, vh));
    }
    let o = g.concat_cols(&heads_out);
    let out = if out_proj {
        linear(
            g,
            store,
            o,
            &format!("{prefix}.wo"),
            &format!("{prefix}.bo"),
            hook("wo").as_ref(),
        )
    } else {
        o
    };
    (out, head_probs)
}

/// Two-layer GELU feed-forward under `<prefix>.{w1,b1,w2,b2}`.
pub fn ffn(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, lora: Option<&LoraHook>) -> Var {
    let hook = |leaf: &str| {
        lora.map(|h| LoraHook {
            prefix: format!("{}.{leaf}", h.prefix),
            alpha: h.alpha,
            rank: h.rank,
        })
    };
    let h1 = linear(
        g,
        store,
        x,
        &format!("{prefix}.w1"),
        &format!("{prefix}.b1"),
        hook("w1").as_ref(),
    );
    let h1 = g.gelu(h1);
    linear(
        g,
        store,
        h1,
        &format!("{prefix}.w2"),
        &format!("{prefix}.b2"),
        hook("w2").as_ref(),
    )
}

// ---- initialization -------------------------------------------------------

pub fn init_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    w_name: &str,
    b_name: &str,
    d_in: usize,
    d_out: usize,
) {
    store.insert(w_name, randn(rng, d_in, d_out, 1.0 / (d_in as f64).sqrt()));
    store.insert(b_name, Array2::zeros((1, d_out)));
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.g"), Array2::ones((1, d)));
    store.insert(format!("{prefix}.b"), Array2::zeros((1, d)));
}

pub fn init_mha(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    out_proj: bool,
) {
    for leaf in ["q", "k", "v"] {
        init_linear(
            store,
            rng,
            &format!("{prefix}.w{leaf}"),
            &format!("{prefix}.b{leaf}"),
            d,
            d,
        );
    }
    if out_proj {
        init_linear(
            store,
            rng,
            &format!("{prefix}.wo"),
            &format!("{prefix}.bo"),
            d,
            d,
        );
    }
}

pub fn init_ffn(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, hidden: usize) {
    init_linear(
        store,
        rng,
        &format!("{prefix}.w1"),
        &format!("{prefix}.b1"),
        d,
        hidden,
    );
    init_linear(
        store,
        rng,
        &format!("{prefix}.w2"),
        &format!("{prefix}.b2"),
        hidden,
        d,
    );
}

/// Zero-initialized `b` keeps a fresh adapter an exact no-op.
pub fn init_lora(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rank: usize,
) {
    store.insert(
        format!("{prefix}.a"),
        randn(rng, rank, d_in, 1.0 / (d_in as f64).sqrt()),
    );
    store.insert(format!("{prefix}.b"), Array2::zeros((d_out, rank)));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Precision;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn linear_matches_manual() {
        let mut store = ParamStore::new();
        store.insert("proj.t.w", array![[1.0, 0.0], [0.0, 2.0]]);
        store.insert("proj.t.b", array![[0.5, -0.5]]);
        let mut g = Graph::new(Precision::Double);
        let x = g.input(array![[1.0, 1.0], [2.0, 3.0]]);
        let y = linear(&mut g, &store, x, "proj.t.w", "proj.t.b", None);
        assert_eq!(g.value(y), &array![[1.5, 1.5], [2.5, 5.5]]);
    }

    #[test]
    fn mha_all_true_mask_is_bitwise_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        init_mha(&mut store, &mut rng, "local_attn", 8, false);
        let x = randn(&mut rng, 5, 8, 1.0);

        let mut g1 = Graph::new(Precision::Double);
        let x1 = g1.input(x.clone());
        let o1 = mha(&mut g1, &store, "local_attn", x1, x1, 2, None, false, None);

        let mask = Arc::new(Array2::from_elem((5, 5), true));
        let mut g2 = Graph::new(Precision::Double);
        let x2 = g2.input(x);
        let o2 = mha(&mut g2, &store, "local_attn", x2, x2, 2, Some(mask), false, None);

        assert_eq!(g1.value(o1), g2.value(o2));
    }

    #[test]
    fn lora_zero_b_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        init_linear(&mut store, &mut rng, "lm.t.w", "lm.t.b", 6, 6);
        init_lora(&mut store, &mut rng, "lora.t", 6, 6, 3);
        let hook = LoraHook {
            prefix: "lora.t".into(),
            alpha: 8.0,
            rank: 3,
        };
        let x = randn(&mut rng, 4, 6, 1.0);

        let mut g = Graph::new(Precision::Double);
        let xv = g.input(x.clone());
        let plain = linear(&mut g, &store, xv, "lm.t.w", "lm.t.b", None);
        let adapted = linear(&mut g, &store, xv, "lm.t.w", "lm.t.b", Some(&hook));
        assert_eq!(g.value(plain), g.value(adapted));

        // nonzero b must change the output
        store.get_mut("lora.t.b")[[0, 0]] = 0.3;
        let mut g = Graph::new(Precision::Double);
        let xv = g.input(x);
        let plain = linear(&mut g, &store, xv, "lm.t.w", "lm.t.b", None);
        let adapted = linear(&mut g, &store, xv, "lm.t.w", "lm.t.b", Some(&hook));
        assert_ne!(g.value(plain), g.value(adapted));
    }
}
