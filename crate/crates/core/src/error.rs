use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("eigensolver failed to converge: {0}")]
    ConvergenceFailure(String),
    #[error("malformed instance: {0}")]
    MalformedInstance(String),
    #[error("no strictly feasible starting point: {0}")]
    NoStrictInterior(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("scheme recovery failed: {0}")]
    RecoveryFailure(String),
    #[error("cross-check failed: solver rate {rate} vs recomputed {recomputed}")]
    CrossCheckFailure { rate: f64, recomputed: f64 },
    #[error("empirical covariance is rank deficient: {0}")]
    RankDeficiency(String),
    #[error("solver stopped without reaching an optimal point ({status}): {detail}")]
    SolverStopped { status: String, detail: String },
}
