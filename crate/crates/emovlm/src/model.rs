//! Whole-model assembly: every parameter group initialized from one seed,
//! plus the frozen/tuned split used by training and the gradient checker.

use crate::autodiff::{Graph, Precision};
use crate::config::RunConfig;
use crate::error::Result;
use crate::params::{ParamGroup, ParamStore};
use crate::{audio, encoder, lm, nn, qformer, video};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub store: ParamStore,
}

impl Model {
    /// Initialize all parameter groups from `config.seed`. The draw order is
    /// fixed, so a (seed, config) pair always yields the same parameters.
    pub fn init(config: &RunConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        encoder::init_frame_encoder(&mut store, &mut rng, config);
        encoder::init_local_attention(&mut store, &mut rng, config);
        qformer::init_image_qformer(&mut store, &mut rng, config);
        video::init_video_qformer(&mut store, &mut rng, config);
        nn::init_linear(
            &mut store,
            &mut rng,
            "proj.visual.w",
            "proj.visual.b",
            config.d_model,
            config.d_llm,
        );
        audio::init_audio_branch(&mut store, &mut rng, config);
        lm::init_lm(&mut store, &mut rng, config);
        Ok(Model {
            config: config.clone(),
            store,
        })
    }

    pub fn precision(&self) -> Precision {
        if self.config.fp64 {
            Precision::Double
        } else {
            Precision::Single
        }
    }

    pub fn graph(&self) -> Graph {
        Graph::new(self.precision())
    }

    pub fn tuned_groups(&self) -> Result<Vec<ParamGroup>> {
        self.config
            .tuned_groups
            .iter()
            .map(|k| ParamGroup::from_key(k))
            .collect()
    }

    pub fn frozen_groups(&self) -> Result<Vec<ParamGroup>> {
        let tuned = self.tuned_groups()?;
        Ok(ParamGroup::ALL
            .into_iter()
            .filter(|g| !tuned.contains(g))
            .collect())
    }

    pub fn tuned_names(&self) -> Result<Vec<String>> {
        let tuned = self.tuned_groups()?;
        Ok(self
            .store
            .names()
            .filter(|n| ParamGroup::of_name(n).is_some_and(|g| tuned.contains(&g)))
            .map(str::to_string)
            .collect())
    }
}
