//! Named trainable parameters and their gradient accumulators.

use crate::error::{CadgError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// `None` until a backward pass has been absorbed; cleared by `zero_grads`.
    pub grad: Option<Tensor>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Inserts every parameter into `graph` as a gradient-requiring leaf.
    /// The returned vars are indexed by `ParamId`.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| graph.leaf(p.value.clone(), true))
            .collect()
    }

    /// Adds the leaf gradients held by `graph` for `bound` into each
    /// parameter's accumulator. Parameters the loss does not reach receive
    /// zeros, so every bound parameter ends up with a gradient.
    pub fn absorb_grads(&mut self, graph: &Graph, bound: &[Var]) -> Result<()> {
        if bound.len() != self.params.len() {
            return Err(CadgError::Config(format!(
                "{} bound vars for {} parameters",
                bound.len(),
                self.params.len()
            )));
        }
        for (p, &v) in self.params.iter_mut().zip(bound) {
            let acc = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            if let Some(g) = graph.grad(v) {
                for (a, x) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += x;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Replaces values from another set with identical names and shapes.
    pub fn load_values(&mut self, other: &ParamSet) -> Result<()> {
        if other.len() != self.len() {
            return Err(CadgError::Format(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(CadgError::Format(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}
