use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MugError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MugError {
    /// Incompatible tensor shapes for an operation.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("gradient verification failed: {0}")]
    Verification(String),

    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("checksum mismatch in {path}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum {
        path: String,
        stored: u32,
        computed: u32,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MugError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MugError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl std::fmt::Display, msg: impl Into<String>) -> Self {
        MugError::Format {
            path: path.to_string(),
            msg: msg.into(),
        }
    }
}
