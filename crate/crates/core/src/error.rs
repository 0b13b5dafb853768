//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the restoration pipeline.
#[derive(Debug, Error)]
pub enum MuralError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("non-finite value at timestep {timestep}: {context}")]
    NonFiniteAtStep { timestep: usize, context: String },

    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },

    #[error("config error for key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Codec(String),
}

impl MuralError {
    pub(crate) fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        MuralError::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, MuralError>;
