//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("backward: root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("{context}: key sets differ (missing: {missing:?}, unexpected: {unexpected:?})")]
    KeyMismatch {
        context: &'static str,
        missing: Vec<String>,
        unexpected: Vec<String>,
    },

    #[error("divergent initialization: expected init digest {expected}, got {actual}")]
    DigestMismatch { expected: String, actual: String },

    #[error("invalid tensor name {name:?}: {reason}")]
    InvalidName { name: String, reason: String },

    #[error("non-finite value in tensor {name:?}; refusing to serialize")]
    NonFinite { name: String },

    #[error("truncated header: declared {declared} bytes, only {available} available")]
    TruncatedHeader { declared: u64, available: u64 },

    #[error("payload size mismatch: header declares {declared} bytes, file has {actual}")]
    PayloadSizeMismatch { declared: u64, actual: u64 },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("tensor {name:?}: offsets [{start}, {end}) overlap or leave gaps in the payload")]
    OffsetOverlap { name: String, start: u64, end: u64 },

    #[error("tensor {name:?}: unsupported dtype {dtype:?} (only F32 is supported)")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("invalid checkpoint metadata: {0}")]
    InvalidMetadata(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("sanity floor not met: {task} dev accuracy {accuracy:.4} < {floor:.4}")]
    SanityFloor {
        task: String,
        accuracy: f64,
        floor: f64,
    },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
