//! Weighted maximum mean discrepancy for unsupervised domain adaptation.
//!
//! The crate provides multi-kernel MMD estimators (quadratic and linear-time),
//! their class-reweighted counterparts, and a classification-EM trainer that
//! alternates between pseudo-labeling target data, estimating per-class
//! weights and fitting a small softmax network under a weighted-MMD penalty.
//!
//! Modules, bottom up:
//!
//! - [`numerics`]: dense matrices, softmax/cross-entropy, explicit backward passes
//! - [`kernels`]: Gaussian kernels, convex combinations, median-heuristic bandwidth
//! - [`mmd`]: the four estimators and quad-tuple gradients
//! - [`model`]: the classifier, its objective and gradient, checkpoints
//! - [`cem`]: E/C/M steps and the training loop
//! - [`data`]: synthetic mixture pairs and CSV ingestion
//! - [`experiment`]: sweeps and verification suites behind the `wmmd` CLI

pub mod cem;
pub mod data;
pub mod error;
pub mod experiment;
pub mod kernels;
pub mod mmd;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
