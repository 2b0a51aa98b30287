//! Sparse covariance function estimation for high-dimensional functional
//! data.
//!
//! The crate estimates the p x p matrix of covariance surfaces of a vector of
//! random functions by thresholding the Hilbert-Schmidt norms of its entries,
//! with entry-dependent (adaptive) or global (universal) threshold levels.
//! Partially observed noisy curves are handled by local-linear surface
//! smoothing with an optional linear-binning fast path, and a simulation
//! toolkit reproduces the reference experiments.

pub mod binned;
pub mod dense;
pub mod error;
pub mod grid;
pub mod io;
pub mod kernel;
pub mod sim;
pub mod smooth;
pub mod threshold;
pub mod tuning;

pub use dense::{
    adaptive_estimate, sample_cov, universal_estimate, variance_factors, DenseSample,
    SupportMask, ThresholdOptions, ThresholdedEstimate, VarianceField,
};
pub use error::{Error, Result};
pub use grid::{
    functional_frobenius, functional_matrix_l1, hs_norm, sup_norm, CovField, Grid, Surface,
};
pub use kernel::Kernel;
pub use threshold::{apply_threshold, shrinkage_factor, DecisionNorm, ThresholdRule};
