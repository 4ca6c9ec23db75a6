//! Multivariate nested-error regression (MNER).
//!
//! Unit-level mixed model y_ij = R_ij b + v_i + e_ij with k-variate responses:
//! moment estimation of the covariance components (Sigma, Psi) with
//! second-order bias correction, GLS/EBLUP prediction, closed-form
//! second-order MSE-matrix estimation, coverage-corrected confidence
//! intervals, and a deterministic Monte Carlo harness.
//!
//! ## Module map
//! - [`model`]: domain types and the block-structured covariance algebra.
//! - [`varcomp`]: Sigma-hat, Psi-hat-0, exact bias correction, PSD truncation.
//! - [`blup`]: GLS fit, shrinkage, Bayes/EBLUP prediction.
//! - [`uncertainty`]: G1/G2/G3, msem estimator, V, corrected intervals.
//! - [`sim`]: replication harness and the brute-force test oracles.
//! - [`stats`]: in-artifact standard normal Phi, phi, quantile.

pub mod blup;
pub mod error;
pub mod model;
pub mod sim;
pub mod stats;
pub mod uncertainty;
pub mod varcomp;

pub use error::{Error, Result};
pub use model::{
    area_means, marginal_block_inverse, AreaCache, AreaPrediction, CovComponents, Dataset,
    FitResult, MarginalInverse, MsemParts, SymMat, TargetSpec, UnitBlock,
};
