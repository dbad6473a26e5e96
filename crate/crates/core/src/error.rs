use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row}: negative time {value}")]
    NegativeTime { row: usize, value: f64 },

    #[error("row {row}: column `{column}` must be 0 or 1, got {value}")]
    NonBinary {
        row: usize,
        column: &'static str,
        value: f64,
    },

    #[error("row {row}: non-finite value in column {column}")]
    NonFinite { row: usize, column: usize },

    #[error("empty {0} group")]
    EmptyArm(&'static str),

    #[error("cannot split {n} rows so that every split holds both arms")]
    InfeasibleSplit { n: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("covariance matrix is not positive definite")]
    Cholesky,

    #[error("censoring calibration failed: {0}")]
    Calibration(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("time grid needs at least 2 intervals, got {0}")]
    GridTooCoarse(usize),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("Sinkhorn did not converge: marginal violation {violation:e} after {iters} iterations")]
    SinkhornNotConverged { iters: usize, violation: f64 },

    #[error("non-finite value: {0}")]
    Divergence(String),

    #[error("bound violated: {0}")]
    BoundViolation(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
