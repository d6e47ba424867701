//! Individual-level counterfactual outcome estimation under rank
//! preservation, with quantile-regression baselines, a synthetic data
//! generator and an experiment harness.

pub mod baselines;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod kernels;
pub mod metrics;
pub mod propensity;
pub mod rank;
pub mod simulator;

pub use error::{Error, Result};
