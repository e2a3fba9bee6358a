//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LsaError {
    #[error("invalid {what}: {why}")]
    Invalid { what: String, why: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {why}")]
    Malformed { path: String, why: String },

    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("{0}")]
    Msg(String),
}

impl LsaError {
    pub fn invalid(what: impl Into<String>, why: impl Into<String>) -> Self {
        LsaError::Invalid {
            what: what.into(),
            why: why.into(),
        }
    }

    pub fn shape(context: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        LsaError::ShapeMismatch {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        LsaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(path: impl Into<String>, why: impl Into<String>) -> Self {
        LsaError::Malformed {
            path: path.into(),
            why: why.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, LsaError>;
