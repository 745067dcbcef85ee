use thiserror::Error;

/// Errors produced anywhere in the dispatch toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("position ({lon}, {lat}) lies outside the grid bounding box")]
    OutOfBounds { lon: f64, lat: f64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("covariance matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("cholesky factorization failed after {0} jitter attempts")]
    Cholesky(usize),

    #[error("box set empty for resample size {have}; increase N_B to at least {required}")]
    EmptyBox { have: usize, required: usize },

    #[error("supply must be strictly positive, found b[{index}] = {value}")]
    Domain { index: usize, value: f64 },

    #[error("uncertainty set is empty")]
    EmptySet,

    #[error("problem is infeasible: {0}")]
    Infeasible(String),

    #[error("vertex enumeration exceeded the cap of {0} candidate subsets")]
    VertexCap(usize),

    #[error("solver failed at step {step}: {reason}")]
    StepFailed { step: usize, reason: String },

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
