//! SGD with momentum and L2 weight decay.
//!
//! Update rule per parameter `p` with gradient `g`:
//!
//! ```text
//! v <- momentum * v + (g + weight_decay * p)
//! p <- p - lr * v
//! ```
//!
//! Gradients are not cleared here; call [`ParamSet::zero_grads`] afterwards.

use crate::error::{CadgError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate >= 0.0) {
            return Err(CadgError::Config(format!("learning rate {learning_rate}")));
        }
        if !(momentum.is_finite() && (0.0..1.0).contains(&momentum)) {
            return Err(CadgError::Config(format!("momentum {momentum} not in [0, 1)")));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(CadgError::Config(format!("weight decay {weight_decay}")));
        }
        Ok(OptimizerState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        })
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(CadgError::Config(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(CadgError::MissingGradient(p.name.clone()));
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let g = p.grad.as_ref().expect("checked above");
            let (pv, gv, vv) = (p.value.data_mut(), g.data(), v.data_mut());
            for i in 0..pv.len() {
                vv[i] = self.momentum * vv[i] + (gv[i] + self.weight_decay * pv[i]);
                pv[i] -= self.learning_rate * vv[i];
            }
        }
        Ok(())
    }
}
