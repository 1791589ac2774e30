//! Black-box membership-inference attacks against small softmax classifiers,
//! and the MMD + mix-up training defense, on synthetic tabular data.
//!
//! The crate is organized bottom-up:
//!
//! * [`dataset`]: Gaussian-cluster data and the evaluation / general / holdout split.
//! * [`model`]: MLP with exact backpropagation.
//! * [`train`]: minibatch SGD with mix-up, MMD regularization and DP-SGD noising.
//! * [`attacks`]: shadow ensembles and the seven attacks.
//! * [`metrics`]: accuracies, generalization gap, advantages and bound checks.
//! * [`runner`]: config-driven experiments and reports.

pub mod attacks;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod runner;
pub mod train;

pub use error::{Error, Result};
