use thiserror::Error;

/// Errors produced by the estimation, analysis, and simulation layers.
///
/// Numerical payloads are carried as `f64` regardless of the scalar the
/// computation ran in; they are diagnostic only.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("{context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: String,
        found: String,
    },

    #[error("closed-loop matrix for sensor {sensor} is not Schur: spectral radius {radius}")]
    NotSchur { sensor: usize, radius: f64 },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("singular determinant argument: {what} (min eigenvalue {min_eig:e})")]
    SingularArgument { what: String, min_eig: f64 },

    #[error("detector supports pools of exactly {expected} sensors, found {found}")]
    PoolSizeUnsupported { expected: usize, found: usize },

    #[error("length mismatch in {context}: {left} vs {right}")]
    LengthMismatch {
        context: String,
        left: usize,
        right: usize,
    },

    #[error("covariance factorization failed for {matrix}")]
    FactorizationFailed { matrix: String },

    #[error("run {run} failed")]
    RunFailed {
        run: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
