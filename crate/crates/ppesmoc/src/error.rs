//! Error types shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is outside the problem bounds: dimension {dim}, value {value}")]
    OutOfBounds { dim: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("matrix is not positive definite after maximum jitter")]
    NotPositiveDefinite,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown problem: {0}")]
    UnknownProblem(String),

    #[error("hypervolume is only implemented for two objectives, got {0}")]
    UnsupportedObjectiveCount(usize),

    #[error("Monte Carlo acceptance rate below threshold: {0:.2e}")]
    InsufficientSamples(f64),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
