use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("size mismatch: header declares {expected} values, payload holds {actual}")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("region growth failed: free component around {start:?} holds {reachable} pixels, {requested} requested")]
    GrowthFailed {
        start: (usize, usize),
        requested: usize,
        reachable: usize,
    },

    #[error("covariance is singular even after ridge {ridge:e} (condition estimate {condition:e})")]
    SingularCovariance { ridge: f64, condition: f64 },

    #[error("no eligible CutMix donor for source tag {0:?}")]
    NoDonor(String),

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
