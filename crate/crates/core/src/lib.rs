//! Functional additive mixed models.
//!
//! Penalized tensor-product regression for correlated functional responses:
//! spline and FPC-based effects of scalar and functional covariates, functional
//! random effects with general precision structures, REML smoothing-parameter
//! selection through the mixed-model representation, pointwise empirical-Bayes
//! confidence bands, and a reproducible simulation harness.
//!
//! The `famm` binary exposes the fitting, FPCA, identifiability-check and
//! simulation entry points; see the crate README for file formats.

pub mod basis;
pub mod constraints;
pub mod data;
pub mod error;
pub mod fpca;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod sim;
pub mod solver;
pub mod terms;

pub use error::{FammError, Result};
