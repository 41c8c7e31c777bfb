//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch between two operands; names both shapes.
    #[error("dimension mismatch in {context}: {lhs:?} vs {rhs:?}")]
    DimMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A documented precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed binary or text input; `offset` is the byte position.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// Serialized format version not understood.
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    /// Checkpoint was written under a different configuration.
    #[error("config fingerprint mismatch: checkpoint has {found}, current config is {expected}")]
    FingerprintMismatch { found: String, expected: String },

    /// Invalid configuration value or key.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn dim(context: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::DimMismatch {
            context,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
