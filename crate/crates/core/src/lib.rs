//! Zeroth-order optimization under differential privacy.
//!
//! Two-point finite-difference gradient estimates along random directions,
//! with per-sample clipping and Gaussian noise calibrated to an (ε, δ) budget.

mod error;
pub(crate) mod linalg;

pub mod estimator;
pub mod optimizers;
pub mod privacy;
pub mod problems;
pub mod harness;
pub mod sampling;
pub mod trace;
pub mod validation;

pub use error::{Error, Result};
pub use linalg::ls_slope;
