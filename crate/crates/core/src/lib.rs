//! Cross-attention domain generalization (CADG) at desk scale.
//!
//! The crate bundles everything needed to train and evaluate the model on a
//! single CPU core:
//!
//! - [`tensor`], [`graph`], [`optim`], [`params`], [`checkpoint`]: a small
//!   dense `f64` tensor engine with reverse-mode autodiff, SGD with momentum,
//!   and a binary checkpoint format.
//! - [`attention`]: patch embedding, Q/K/V projection and one attention
//!   primitive that serves both self- and cross-attention.
//! - [`model`]: the four-branch weight-sharing network and its loss.
//! - [`data`]: a synthetic multi-domain shape dataset, stratified splits and
//!   the same-class cross-domain pair sampler.
//! - [`train`]: pair-wise training with validation-based early stopping,
//!   per-domain evaluation and the leave-one-domain-out suite.
//! - [`config`]: run settings, read from and written to TOML.
//! - [`gradcheck`]: central finite-difference verification of gradients.
//! - [`cli`]: the `cadg` command line front end.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{CadgError, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
