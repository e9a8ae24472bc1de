//! Variational expert routing for Mixture-of-Experts models.
//!
//! The crate contains a small dense tensor engine with reverse-mode autodiff,
//! the routers (deterministic Top-K, fixed temperature, MC dropout, Gaussian
//! logit posteriors and learned temperatures), a toy MoE classifier with
//! two-stage training, synthetic domain-shift data, calibration and detection
//! metrics, a perturbation harness and an analytic cost model.

// Negated comparisons also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod efficiency;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod routers;
pub mod stability;

pub use error::{Error, Result};
