//! Causal exposure-response estimation from error-prone, spatially
//! misaligned exposure predictions.
//!
//! Cluster-level outcomes (counts with person-time offsets) are linked to
//! cell-level exposure predictions that carry both prediction error and
//! classical aggregation error. A joint MCMC imputes the latent true
//! exposures (calibration model + exposure model with optional spatial
//! effect + flexible outcome model), and kernel-weighted local-linear
//! smoothing of a multiply-imputed pseudo-outcome turns the retained draws
//! into a smooth exposure-response curve with measurement-error
//! uncertainty propagated through multiple-imputation combining.
//!
//! Entry points:
//! - [`data::Dataset::load`] / [`dgp::generate`] for data,
//! - [`engine::run_chain`] for the sampler,
//! - [`smoother::estimate_erf`] for the curve,
//! - [`harness`] for the simulation-study commands the `erfmi` binary
//!   exposes (`simulate`, `fit`, `evaluate`, `replicate`, `truth`).

pub mod bart;
pub mod car;
pub mod data;
pub mod dgp;
pub mod engine;
pub mod error;
pub mod glm;
pub mod harness;
pub mod impute;
pub mod linear;
pub mod smoother;
mod tune;

pub use error::{Error, Result};
