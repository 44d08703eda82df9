//! Run configuration, read from and written to TOML.
//!
//! ```toml
//! [data]
//! classes = 4
//! domains = 4
//! per_cell = 200
//! image_size = 32
//! channels = 1
//! seed = 7
//!
//! [model]
//! layers = 4
//! dim = 64
//! heads = 4
//! patch = 8
//! mlp_hidden = 128
//!
//! [train]
//! steps = 2000
//! batch = 64
//! lr = 0.003
//! lambda = [0.25, 0.25, 0.25, 0.25]
//! held_out_domain = 0
//! ```
//!
//! Every section and key is optional; unknown keys are an error.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::PatchConfig;
use crate::data::{GeneratorConfig, SplitSpec};
use crate::error::{CadgError, Result};
use crate::model::{LossWeights, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub mlp_hidden: usize,
    pub ln_eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            layers: 4,
            dim: 64,
            heads: 4,
            patch: 8,
            mlp_hidden: 128,
            ln_eps: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda: LossWeights,
    /// Steps between validation rounds.
    pub eval_every: usize,
    /// Validation rounds without improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub init_seed: u64,
    pub sampler_seed: u64,
    pub split_seed: u64,
    pub held_out_domain: usize,
    /// Images per forward pass during evaluation.
    pub eval_batch: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 2000,
            batch: 64,
            lr: 3e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda: LossWeights::default(),
            eval_every: 50,
            patience: 10,
            val_fraction: 0.2,
            init_seed: 0,
            sampler_seed: 1,
            split_seed: 2,
            held_out_domain: 0,
            eval_batch: 128,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: GeneratorConfig,
    pub model: ModelSection,
    pub train: TrainSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CadgError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model_config().validate()?;
        let t = &self.train;
        if t.steps == 0 || t.batch == 0 || t.eval_every == 0 || t.patience == 0 || t.eval_batch == 0 {
            return Err(CadgError::Config(
                "steps, batch, eval_every, patience and eval_batch must be positive".into(),
            ));
        }
        if t.held_out_domain >= self.data.domains {
            return Err(CadgError::Config(format!(
                "held_out_domain {} but only {} domains",
                t.held_out_domain, self.data.domains
            )));
        }
        t.lambda.validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            patch: PatchConfig {
                image_height: self.data.image_size,
                image_width: self.data.image_size,
                channels: self.data.channels,
                patch_size: self.model.patch,
                model_dim: self.model.dim,
                head_count: self.model.heads,
            },
            layers: self.model.layers,
            mlp_hidden: self.model.mlp_hidden,
            classes: self.data.classes,
            ln_eps: self.model.ln_eps,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            val_fraction: self.train.val_fraction,
            split_seed: self.train.split_seed,
        }
    }

    /// Every domain except the held-out one.
    pub fn source_domains(&self) -> Vec<usize> {
        (0..self.data.domains)
            .filter(|&d| d != self.train.held_out_domain)
            .collect()
    }
}
