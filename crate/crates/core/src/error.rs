use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by model validation and the filter recursions.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{name} is not symmetric (max |A - A^T| = {asymmetry:e})")]
    NotSymmetric { name: String, asymmetry: f64 },

    #[error("{name} is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPsd { name: String, min_eigenvalue: f64 },

    #[error("Sigma is singular (smallest eigenvalue {min_eigenvalue:e})")]
    SigmaSingular { min_eigenvalue: f64 },

    #[error("innovation covariance H M H^T + Sigma is not positive definite")]
    InnovationCovSingular,

    #[error("steady-state iteration did not converge in {iterations} iterations (last residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
