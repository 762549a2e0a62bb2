//! Frame encoder and localized micro-expression attention.
//!
//! A small ViT stands in for the pretrained image backbone: patch embedding
//! with a learned positional term, then pre-norm self-attention/feed-forward
//! blocks with residual connections (parameters under `vit.*`, frozen during
//! training). The masked local attention (`local_attn.*`, tuned) runs on the
//! encoded frame features and restricts every patch to the micro-expression
//! regions it shares, producing the local facial feature stream.
//!
//! The local attention runs on post-encoder features rather than raw patch
//! embeddings; the architecture diagram orders encoder before mask.

use crate::autodiff::{Graph, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::{AttentionMask, PatchGrid};
use crate::nn;
use crate::params::{randn, ParamStore};
use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

pub const IMAGE_CHANNELS: usize = 3;

/// Encoded frame: one token per patch plus the frame's timestamp.
#[derive(Clone, Copy, Debug)]
pub struct FrameFeatures {
    pub node: Var,
    pub n_patches: usize,
    pub d_model: usize,
    pub timestamp_s: f64,
}

pub fn init_frame_encoder(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &RunConfig) {
    let d = cfg.d_model;
    let patch_dim = cfg.patch_size * cfg.patch_size * IMAGE_CHANNELS;
    nn::init_linear(store, rng, "vit.patch.w", "vit.patch.b", patch_dim, d);
    store.insert("vit.pos", randn(rng, cfg.n_patches(), d, 0.02));
    for l in 0..cfg.encoder_layers {
        let p = format!("vit.l{l}");
        nn::init_layer_norm(store, &format!("{p}.ln1"), d);
        nn::init_mha(store, rng, &format!("{p}.attn"), d, true);
        nn::init_layer_norm(store, &format!("{p}.ln2"), d);
        nn::init_ffn(store, rng, &format!("{p}.ffn"), d, d * cfg.ffn_mult);
    }
}

pub fn init_local_attention(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &RunConfig) {
    // no output projection: the per-head value mix is the local feature
    nn::init_mha(store, rng, "local_attn", cfg.d_model, false);
}

/// Flatten each patch row-major (then channel) into one row of a
/// `[n_patches, patch*patch*channels]` matrix.
pub fn flatten_patches(image: &Array3<f64>, grid: PatchGrid) -> Result<Array2<f64>> {
    let (h, w, c) = image.dim();
    if h != grid.image_h || w != grid.image_w || c != IMAGE_CHANNELS {
        return Err(Error::Shape {
            context: "patch_embed image".into(),
            expected: format!("{}x{}x{}", grid.image_h, grid.image_w, IMAGE_CHANNELS),
            got: format!("{h}x{w}x{c}"),
        });
    }
    let p = grid.patch;
    let mut out = Array2::zeros((grid.n_patches(), p * p * c));
    for pr in 0..grid.n_rows() {
        for pc in 0..grid.n_cols() {
            let row = pr * grid.n_cols() + pc;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        out[[row, (dy * p + dx) * c + ch]] =
                            image[[pr * p + dy, pc * p + dx, ch]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Linear projection of flattened patch pixels plus the learned positional
/// term.
pub fn patch_embed(
    g: &mut Graph,
    store: &ParamStore,
    image: &Array3<f64>,
    grid: PatchGrid,
) -> Result<Var> {
    let patches = flatten_patches(image, grid)?;
    let x = g.input(patches);
    let projected = nn::linear(g, store, x, "vit.patch.w", "vit.patch.b", None);
    let pos = store.bind(g, "vit.pos");
    Ok(g.add(projected, pos))
}

/// Patch embedding followed by the encoder blocks; attaches the timestamp.
pub fn encode_frame(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    image: &Array3<f64>,
    timestamp_s: f64,
    grid: PatchGrid,
) -> Result<FrameFeatures> {
    let mut x = patch_embed(g, store, image, grid)?;
    for l in 0..cfg.encoder_layers {
        let p = format!("vit.l{l}");
        let xn = nn::layer_norm(g, store, x, &format!("{p}.ln1"));
        let attn = nn::mha(
            g,
            store,
            &format!("{p}.attn"),
            xn,
            xn,
            cfg.encoder_heads,
            None,
            true,
            None,
        );
        x = g.add(x, attn);
        let xn = nn::layer_norm(g, store, x, &format!("{p}.ln2"));
        let f = nn::ffn(g, store, &format!("{p}.ffn"), xn, None);
        x = g.add(x, f);
        if !g.is_finite(x) {
            return Err(Error::Numeric(format!("frame encoder layer {l}")));
        }
    }
    Ok(FrameFeatures {
        node: x,
        n_patches: grid.n_patches(),
        d_model: cfg.d_model,
        timestamp_s,
    })
}

/// Multi-head attention over the frame features where each patch may attend
/// only to its permitted keys. Softmax runs over the permitted support, so
/// disallowed keys carry exactly zero weight.
pub fn masked_local_attention(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    features: &FrameFeatures,
    mask: &AttentionMask,
) -> Result<Var> {
    masked_local_attention_with_probs(g, store, cfg, features, mask).map(|(out, _)| out)
}

/// [`masked_local_attention`] that also returns each head's attention
/// probability matrix so invariants on the weights can be checked directly.
pub fn masked_local_attention_with_probs(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    features: &FrameFeatures,
    mask: &AttentionMask,
) -> Result<(Var, Vec<Var>)> {
    let n = features.n_patches;
    if mask.allowed.dim() != (n, n) {
        return Err(Error::Shape {
            context: "masked_local_attention".into(),
            expected: format!("{n}x{n} mask"),
            got: format!("{}x{}", mask.allowed.nrows(), mask.allowed.ncols()),
        });
    }
    if let Some(i) = (0..n).find(|&i| !mask.allowed.row(i).iter().any(|&b| b)) {
        return Err(Error::Input(format!(
            "contract violation: attention mask row {i} permits no keys"
        )));
    }
    Ok(nn::mha_with_probs(
        g,
        store,
        "local_attn",
        features.node,
        features.node,
        cfg.encoder_heads,
        Some(Arc::new(mask.allowed.clone())),
        false,
        None,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Precision;
    use crate::geometry::RegionMask;
    use crate::gradcheck::{central_diff, relative_error};
    use crate::oracle;
    use rand::{Rng, SeedableRng};

    fn toy_cfg() -> RunConfig {
        RunConfig {
            image_size: 16,
            patch_size: 8,
            d_model: 16,
            encoder_layers: 2,
            encoder_heads: 2,
            ffn_mult: 2,
            fp64: true,
            ..RunConfig::default()
        }
    }

    fn toy_store(cfg: &RunConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_frame_encoder(&mut store, &mut rng, cfg);
        init_local_attention(&mut store, &mut rng, cfg);
        store
    }

    fn rand_image(rng: &mut ChaCha8Rng, size: usize) -> Array3<f64> {
        Array3::from_shape_fn((size, size, IMAGE_CHANNELS), |_| rng.gen::<f64>())
    }

    #[test]
    fn zero_image_yields_positional_terms() {
        let cfg = toy_cfg();
        let store = toy_store(&cfg, 3);
        let grid = PatchGrid::new(16, 16, 8).unwrap();
        let image = Array3::zeros((16, 16, IMAGE_CHANNELS));
        let mut g = Graph::new(Precision::Double);
        let v = patch_embed(&mut g, &store, &image, grid).unwrap();
        assert_eq!(g.value(v), store.get("vit.pos"));
    }

    #[test]
    fn patch_embed_matches_direct_matmul() {
        let cfg = toy_cfg();
        let mut store = toy_store(&cfg, 4);
        let grid = PatchGrid::new(16, 16, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let image = rand_image(&mut rng, 16);

        let mut g = Graph::new(Precision::Double);
        let v = patch_embed(&mut g, &store, &image, grid).unwrap();

        let flat = flatten_patches(&image, grid).unwrap();
        let expected =
            flat.dot(store.get("vit.patch.w")) + &store.get("vit.patch.b").row(0) + store.get("vit.pos");
        let diff = (g.value(v) - &expected).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(diff < 1e-12);

        // dimension mismatch is a shape error
        store.insert("vit.pos", Array2::zeros((4, cfg.d_model)));
        let bad = Array3::zeros((8, 8, IMAGE_CHANNELS));
        let mut g = Graph::new(Precision::Double);
        assert!(matches!(
            patch_embed(&mut g, &store, &bad, grid),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn swapping_patches_swaps_flattened_rows() {
        let grid = PatchGrid::new(16, 16, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let image = rand_image(&mut rng, 16);
        let mut swapped = image.clone();
        // swap patch (0,0) and patch (0,1)
        for dy in 0..8 {
            for dx in 0..8 {
                for c in 0..IMAGE_CHANNELS {
                    swapped[[dy, dx, c]] = image[[dy, 8 + dx, c]];
                    swapped[[dy, 8 + dx, c]] = image[[dy, dx, c]];
                }
            }
        }
        let a = flatten_patches(&image, grid).unwrap();
        let b = flatten_patches(&swapped, grid).unwrap();
        assert_eq!(a.row(0), b.row(1));
        assert_eq!(a.row(1), b.row(0));
        assert_eq!(a.row(2), b.row(2));
        assert_eq!(a.row(3), b.row(3));
    }

    #[test]
    fn zero_layers_is_patch_embed() {
        let cfg = RunConfig {
            encoder_layers: 0,
            ..toy_cfg()
        };
        let store = toy_store(&cfg, 7);
        let grid = PatchGrid::new(16, 16, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let image = rand_image(&mut rng, 16);
        let mut g = Graph::new(Precision::Double);
        let feats = encode_frame(&mut g, &store, &cfg, &image, 1.5, grid).unwrap();
        let embed = patch_embed(&mut g, &store, &image, grid).unwrap();
        assert_eq!(g.value(feats.node), g.value(embed));
        assert_eq!(feats.timestamp_s, 1.5);
        assert_eq!(g.shape(feats.node), (4, cfg.d_model));
    }

    #[test]
    fn masked_attention_matches_dense_oracle() {
        let cfg = toy_cfg();
        let store = toy_store(&cfg, 9);
        let grid = PatchGrid::new(16, 16, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let image = rand_image(&mut rng, 16);

        // patches {0,1} share a region, {2} alone, {3} in none
        let mut membership = Array2::from_elem((4, 2), false);
        membership[[0, 0]] = true;
        membership[[1, 0]] = true;
        membership[[2, 1]] = true;
        let mask = crate::geometry::expand_to_attention_mask(&RegionMask {
            membership,
            grid,
            threshold: 0.5,
        });

        let mut g = Graph::new(Precision::Double);
        let feats = encode_frame(&mut g, &store, &cfg, &image, 0.0, grid).unwrap();
        let out = masked_local_attention(&mut g, &store, &cfg, &feats, &mask).unwrap();

        let x = g.value(feats.node).clone();
        let expected = oracle::dense_masked_attention(
            &x,
            store.get("local_attn.wq"),
            store.get("local_attn.bq"),
            store.get("local_attn.wk"),
            store.get("local_attn.bk"),
            store.get("local_attn.wv"),
            store.get("local_attn.bv"),
            cfg.encoder_heads,
            &mask.allowed,
        );
        let diff = (g.value(out) - &expected)
            .iter()
            .fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(diff < 1e-10, "max diff {diff}");
    }

    #[test]
    fn identity_mask_returns_own_value_projection() {
        let cfg = toy_cfg();
        let store = toy_store(&cfg, 11);
        let grid = PatchGrid::new(16, 16, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let image = rand_image(&mut rng, 16);

        let mut g = Graph::new(Precision::Double);
        let feats = encode_frame(&mut g, &store, &cfg, &image, 0.0, grid).unwrap();
        let mask = AttentionMask {
            allowed: Array2::from_shape_fn((4, 4), |(i, j)| i == j),
        };
        let out = masked_local_attention(&mut g, &store, &cfg, &feats, &mask).unwrap();

        let x = g.value(feats.node);
        let v = x.dot(store.get("local_attn.wv")) + &store.get("local_attn.bv").row(0);
        let diff = (g.value(out) - &v).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(diff < 1e-12, "max diff {diff}");
    }

    #[test]
    fn all_false_row_is_rejected() {
        let cfg = toy_cfg();
        let store = toy_store(&cfg, 13);
        let grid = PatchGrid::new(16, 16, 8).unwrap();
        let image = Array3::zeros((16, 16, IMAGE_CHANNELS));
        let mut g = Graph::new(Precision::Double);
        let feats = encode_frame(&mut g, &store, &cfg, &image, 0.0, grid).unwrap();
        let mut allowed = Array2::from_elem((4, 4), true);
        allowed.row_mut(2).fill(false);
        let err = masked_local_attention(&mut g, &store, &cfg, &feats, &AttentionMask { allowed });
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn attention_rows_sum_to_one_and_mask_locality_holds() {
        let cfg = toy_cfg();
        let store = toy_store(&cfg, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let tokens = randn(&mut rng, 4, cfg.d_model, 1.0);

        // nobody but patch 3 itself may attend to patch 3
        let mut allowed = Array2::from_elem((4, 4), false);
        allowed[[0, 0]] = true;
        allowed[[0, 1]] = true;
        for i in 1..4 {
            allowed[[i, i]] = true;
            allowed[[i, 0]] = true;
        }
        let mask = AttentionMask { allowed };

        let run = |x: &Array2<f64>| {
            let mut g = Graph::new(Precision::Double);
            let node = g.input(x.clone());
            let feats = FrameFeatures {
                node,
                n_patches: 4,
                d_model: cfg.d_model,
                timestamp_s: 0.0,
            };
            let (out, probs) =
                masked_local_attention_with_probs(&mut g, &store, &cfg, &feats, &mask).unwrap();
            for p in probs {
                let p = g.value(p);
                for i in 0..4 {
                    let permitted: f64 = (0..4)
                        .filter(|&j| mask.allowed[[i, j]])
                        .map(|j| p[[i, j]])
                        .sum();
                    assert!((permitted - 1.0).abs() <= 1e-6);
                    for j in 0..4 {
                        if !mask.allowed[[i, j]] {
                            assert_eq!(p[[i, j]], 0.0);
                        }
                    }
                }
            }
            g.value(out).clone()
        };
        let base = run(&tokens);

        // perturbing a token no other query is permitted to attend to
        // leaves every other output row bit-identical
        let mut perturbed = tokens.clone();
        for j in 0..cfg.d_model {
            perturbed[[3, j]] += 0.7;
        }
        let moved = run(&perturbed);
        for i in 0..3 {
            assert_eq!(base.row(i), moved.row(i), "row {i} must not move");
        }
        assert_ne!(base.row(3), moved.row(3));
    }

    #[test]
    fn encoder_and_local_attention_gradients_check_out()
    {
        let cfg = toy_cfg();
        let store = toy_store(&cfg, 16);
        let grid = PatchGrid::new(16, 16, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let image = rand_image(&mut rng, 16);
        let probe = randn(&mut rng, 4, cfg.d_model, 1.0);
        let mask = AttentionMask {
            allowed: Array2::from_shape_fn((4, 4), |(i, j)| i == j || j == 0),
        };

        let loss_of = |s: &ParamStore| {
            let mut g = Graph::new(Precision::Double);
            let feats = encode_frame(&mut g, s, &cfg, &image, 0.0, grid).unwrap();
            let local = masked_local_attention(&mut g, s, &cfg, &feats, &mask).unwrap();
            let pr = g.input(probe.clone());
            let prod = g.mul(local, pr);
            let root = g.sum_all(prod);
            (g, root)
        };

        let (g, root) = loss_of(&store);
        let grads = g.backward(root);
        let by_name = g.grads_by_name(&grads);

        let mut coord_rng = ChaCha8Rng::seed_from_u64(18);
        for name in [
            "vit.patch.w",
            "vit.pos",
            "vit.l0.attn.wq",
            "vit.l0.ffn.w1",
            "vit.l1.ln1.g",
            "vit.l1.attn.bo",
            "local_attn.wq",
            "local_attn.wv",
            "local_attn.bk",
        ] {
            let a = &by_name[name];
            for _ in 0..3 {
                let i = coord_rng.gen_range(0..a.nrows());
                let j = coord_rng.gen_range(0..a.ncols());
                let numeric = central_diff(&store, name, (i, j), 1e-5, |s| {
                    let (g, root) = loss_of(s);
                    g.value(root)[[0, 0]]
                });
                let rel = relative_error(a[[i, j]], numeric);
                assert!(rel <= 1e-4, "{name}[{i},{j}] rel err {rel}");
            }
        }
    }

    #[test]
    fn deterministic_forward() {
        let cfg = toy_cfg();
        let store = toy_store(&cfg, 19);
        let grid = PatchGrid::new(16, 16, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let image = rand_image(&mut rng, 16);
        let run = || {
            let mut g = Graph::new(Precision::Double);
            let f = encode_frame(&mut g, &store, &cfg, &image, 2.0, grid).unwrap();
            g.value(f.node).clone()
        };
        assert_eq!(run(), run());
    }
}
