//! Error type shared by all estimation and simulation stages.

use thiserror::Error;

/// Failures surfaced by the estimation pipeline and the simulation harness.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// A covariance-like matrix could not be inverted (reciprocal condition below 1e-12).
    #[error("singular covariance: {name} (rcond {rcond:.2e})")]
    SingularCovariance { name: String, rcond: f64 },

    /// Too few observations for the requested estimator.
    #[error("insufficient degrees of freedom: {0}")]
    InsufficientDegreesOfFreedom(String),

    /// The stacked regressor matrix does not have full column rank.
    #[error("rank-deficient design: {0}")]
    RankDeficientDesign(String),

    /// The quadratic form l'(msem)l was not positive, so no interval exists.
    #[error("nonpositive mse scalar: l'(msem)l = {0:.6e}")]
    NonpositiveMse(f64),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// The dense test oracle refused a problem too large to materialize.
    #[error("oracle too large: Nk = {nk} exceeds limit {limit}")]
    OracleTooLarge { nk: usize, limit: usize },

    /// Input matrix violated a shape or symmetry invariant.
    #[error("shape error: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, Error>;
