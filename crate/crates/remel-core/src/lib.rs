//! Longitudinal linear regression with replicate covariate measurement
//! errors, estimated by maximum empirical likelihood over cross-replicate
//! moment functions.
//!
//! The library covers the full pipeline: long-format data ingestion with
//! replicate surrogate columns, working-covariance estimation, reduction
//! of the cross-replicate moment vector to a full-rank basis, the inner
//! Lagrange-multiplier solve, the outer coefficient search, chi-squared
//! tests and profile confidence intervals, reference estimators (naive
//! weighted least squares, naive empirical likelihood, and the
//! cross-replicate estimating equation), and a reproducible synthetic
//! study harness.

pub mod auxiliary;
pub mod baselines;
pub mod covariance;
pub mod dataset;
pub mod el;
pub mod error;
pub mod inference;
pub mod sim;

pub use error::{Error, Result};
