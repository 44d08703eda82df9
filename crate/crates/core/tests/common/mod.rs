#![allow(dead_code)]

use cadg::attention::PatchConfig;
use cadg::config::RunConfig;
use cadg::model::{CadgWeights, LossWeights, ModelConfig};
use cadg::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Two layers, width 8, two heads, 4×4 images in a 2×2 patch grid, 3 classes.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        patch: PatchConfig {
            image_height: 4,
            image_width: 4,
            channels: 1,
            patch_size: 2,
            model_dim: 8,
            head_count: 2,
        },
        layers: 2,
        mlp_hidden: 16,
        classes: 3,
        ln_eps: 1e-5,
    }
}

pub fn weights(seed: u64, lambda: LossWeights) -> CadgWeights {
    CadgWeights::init(small_model(), lambda, &mut rng(seed)).unwrap()
}

pub fn images(r: &mut ChaCha8Rng, batch: usize) -> Tensor {
    Tensor::uniform(&[batch, 4, 4, 1], 0.0, 1.0, r)
}

/// A run small enough to train in well under a second per hundred steps:
/// 3 classes, 3 domains, 12 images per cell at 8×8, one 8-wide layer.
pub fn quick_run() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.classes = 3;
    cfg.data.domains = 3;
    cfg.data.per_cell = 12;
    cfg.data.image_size = 8;
    cfg.model.layers = 1;
    cfg.model.dim = 8;
    cfg.model.heads = 2;
    cfg.model.patch = 4;
    cfg.model.mlp_hidden = 16;
    cfg.train.steps = 40;
    cfg.train.batch = 8;
    cfg.train.lr = 0.02;
    cfg.train.eval_every = 10;
    cfg.train.patience = 100;
    cfg.train.val_fraction = 0.25;
    cfg.train.eval_batch = 16;
    cfg
}
