//! Central finite-difference gradient verification.
//!
//! The numeric side never records a backward pass: every probe rebuilds the
//! scalar from constant leaves, so it is independent of the graph's
//! derivative rules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::PatchConfig;
use crate::error::{CadgError, Result};
use crate::graph::{Graph, Var};
use crate::model::{CadgWeights, LossWeights, ModelConfig};
use crate::tensor::Tensor;

/// Probe step `h` for `(f(x+h) - f(x-h)) / 2h`.
pub const FD_STEP: f64 = 1e-4;

/// Magnitudes below this are compared on an absolute scale, so a gradient
/// that should be exactly zero does not turn rounding noise into a huge
/// relative error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// `(input index, flat element index)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }

    fn merge(&mut self, other: &GradCheckReport, offset: usize) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.map(|(i, e)| (i + offset, e));
        }
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.checked += other.checked;
    }
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences with respect to every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out)
            .item()
            .ok_or_else(|| CadgError::NotScalar(g.shape(out).to_vec()))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for e in 0..inputs[i].len() {
            let x = inputs[i].data()[e];
            probe[i].data_mut()[e] = x + FD_STEP;
            let plus = eval(&probe)?;
            probe[i].data_mut()[e] = x - FD_STEP;
            let minus = eval(&probe)?;
            probe[i].data_mut()[e] = x;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = grad.data()[e];
            let rel = relative_error(a, numeric);
            let single = GradCheckReport {
                max_rel_err: rel,
                max_abs_err: (a - numeric).abs(),
                checked: 1,
                worst: Some((i, e)),
            };
            report.merge(&single, 0);
        }
    }
    Ok(report)
}

/// Two layers, width 8, one head, 4×4 single-channel images cut into a 2×2
/// patch grid, three classes.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        patch: PatchConfig {
            image_height: 4,
            image_width: 4,
            channels: 1,
            patch_size: 2,
            model_dim: 8,
            head_count: 1,
        },
        layers: 2,
        mlp_hidden: 16,
        classes: 3,
        ln_eps: 1e-5,
    }
}

/// Checks the gradient of the combined four-branch loss with respect to every
/// model parameter.
pub fn check_model_gradients(
    weights: &CadgWeights,
    x1: &Tensor,
    x2: &Tensor,
    labels: &[usize],
) -> Result<GradCheckReport> {
    let inputs: Vec<Tensor> = weights.params().iter().map(|p| p.value.clone()).collect();
    check_gradients(&inputs, |g, vars| {
        let bw = weights.bind_vars(vars.to_vec());
        Ok(weights.forward(g, &bw, x1, x2, labels)?.total)
    })
}

/// [`check_model_gradients`] on the tiny model with a random batch of two
/// pairs and uneven loss weights.
///
/// The class token and positional embeddings are redrawn at unit scale. At
/// their usual 0.02 initialization the class token enters the first layer
/// norm with a spread close to the probe step, and the central difference
/// then measures curvature rather than slope.
pub fn tiny_model_report(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_model_config();
    let mut weights = CadgWeights::init(cfg, LossWeights([0.1, 0.2, 0.3, 0.4]), &mut rng)?;
    for p in weights.params_mut().iter_mut() {
        if p.name == "embed.class_token" || p.name == "embed.position" {
            p.value = Tensor::randn(p.value.shape(), 1.0, &mut rng);
        }
    }
    let x1 = Tensor::randn(&[2, 4, 4, 1], 1.0, &mut rng);
    let x2 = Tensor::randn(&[2, 4, 4, 1], 1.0, &mut rng);
    check_model_gradients(&weights, &x1, &x2, &[0, 2])
}
