//! Audio branch: fixed-length chunking, a frozen chunk projection standing
//! in for the pretrained audio encoder, a whole-sequence Q-Former, and the
//! projection to language-model width.

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::ParamStore;
use crate::qformer;
use crate::tokens::{Provenance, TokenSeq};
use crate::video;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioTrack {
    pub sample_rate: usize,
    pub samples: Vec<f64>,
}

pub fn init_audio_branch(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &RunConfig) {
    nn::init_linear(
        store,
        rng,
        "audio_enc.w",
        "audio_enc.b",
        cfg.audio_chunk,
        cfg.d_model,
    );
    qformer::init_qformer(store, rng, "audio_qf", cfg, false);
    nn::init_linear(
        store,
        rng,
        "proj.audio.w",
        "proj.audio.b",
        cfg.d_model,
        cfg.d_llm,
    );
}

/// Split the waveform into `[n_chunks, chunk]` rows, zero-padding the tail.
pub fn chunk_waveform(samples: &[f64], chunk: usize) -> Array2<f64> {
    let n_chunks = samples.len().div_ceil(chunk);
    let mut out = Array2::zeros((n_chunks, chunk));
    for (i, v) in samples.iter().enumerate() {
        out[[i / chunk, i % chunk]] = *v;
    }
    out
}

/// Chunk, project, compress with the audio Q-Former, and map to `d_llm`.
pub fn encode_audio(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    audio: &AudioTrack,
) -> Result<TokenSeq> {
    if audio.samples.is_empty() {
        return Err(Error::Input("empty waveform".into()));
    }
    let chunks = g.input(chunk_waveform(&audio.samples, cfg.audio_chunk));
    let embedded = nn::linear(g, store, chunks, "audio_enc.w", "audio_enc.b", None);
    let compressed = qformer::qformer_pass(g, store, "audio_qf", cfg, embedded, None)?;
    let tokens = TokenSeq::new(g, compressed, Provenance::Audio);
    video::project_to_llm(g, store, &tokens, "proj.audio")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Precision;
    use crate::gradcheck::{central_diff, relative_error};
    use crate::params::randn;
    use rand::{Rng, SeedableRng};

    fn toy_cfg() -> RunConfig {
        RunConfig {
            d_model: 16,
            n_queries: 4,
            qformer_blocks: 1,
            qformer_heads: 2,
            ffn_mult: 2,
            d_llm: 24,
            audio_chunk: 32,
            fp64: true,
            ..RunConfig::default()
        }
    }

    fn toy_store(cfg: &RunConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_audio_branch(&mut store, &mut rng, cfg);
        store
    }

    fn sine(n: usize) -> AudioTrack {
        AudioTrack {
            sample_rate: 200,
            samples: (0..n).map(|i| (i as f64 * 0.13).sin()).collect(),
        }
    }

    #[test]
    fn fixed_token_count_and_width() {
        let cfg = toy_cfg();
        let store = toy_store(&cfg, 60);
        for n in [1usize, 31, 32, 33, 200] {
            let mut g = Graph::new(Precision::Double);
            let out = encode_audio(&mut g, &store, &cfg, &sine(n)).unwrap();
            assert_eq!((out.rows, out.width), (cfg.n_queries, cfg.d_llm));
            assert_eq!(out.provenance, Provenance::Audio);
        }
        let mut g = Graph::new(Precision::Double);
        let empty = AudioTrack {
            sample_rate: 200,
            samples: vec![],
        };
        assert!(matches!(
            encode_audio(&mut g, &store, &cfg, &empty),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn zero_waveform_embeds_to_zero_chunks() {
        let cfg = toy_cfg();
        let store = toy_store(&cfg, 61); // bias is zero-initialized
        let silent = AudioTrack {
            sample_rate: 200,
            samples: vec![0.0; 70],
        };
        let mut g = Graph::new(Precision::Double);
        let chunks = g.input(chunk_waveform(&silent.samples, cfg.audio_chunk));
        let embedded = nn::linear(&mut g, &store, chunks, "audio_enc.w", "audio_enc.b", None);
        assert!(g.value(embedded).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chunking_pads_tail() {
        let chunks = chunk_waveform(&[1.0, 2.0, 3.0, 4.0, 5.0], 3);
        assert_eq!(chunks.nrows(), 2);
        assert_eq!(chunks.row(1).to_vec(), vec![4.0, 5.0, 0.0]);
    }

    #[test]
    fn audio_gradients_check_out() {
        let cfg = toy_cfg();
        let store = toy_store(&cfg, 62);
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let audio = sine(70);
        let probe = randn(&mut rng, cfg.n_queries, cfg.d_llm, 1.0);

        let loss_of = |s: &ParamStore| {
            let mut g = Graph::new(Precision::Double);
            let out = encode_audio(&mut g, s, &cfg, &audio).unwrap();
            let pr = g.input(probe.clone());
            let prod = g.mul(out.node, pr);
            let root = g.sum_all(prod);
            (g, root)
        };
        let (g, root) = loss_of(&store);
        let grads = g.backward(root);
        let by_name = g.grads_by_name(&grads);

        let mut coord_rng = ChaCha8Rng::seed_from_u64(64);
        for name in ["audio_enc.w", "audio_qf.queries", "proj.audio.w", "proj.audio.b"] {
            let analytic = &by_name[name];
            for _ in 0..3 {
                let i = coord_rng.gen_range(0..analytic.nrows());
                let j = coord_rng.gen_range(0..analytic.ncols());
                let numeric = central_diff(&store, name, (i, j), 1e-5, |s| {
                    let (g, root) = loss_of(s);
                    g.value(root)[[0, 0]]
                });
                let rel = relative_error(analytic[[i, j]], numeric);
                assert!(rel <= 1e-4, "{name}[{i},{j}] rel err {rel}");
            }
        }
    }
}
