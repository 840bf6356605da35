//! Crate-wide error type.
//!
//! Errors are grouped into three kinds so the CLI can map them onto stable
//! exit codes: validation (bad specs, bad shapes, bad flags), data (I/O,
//! parsing, cache integrity) and numeric (NaN/Inf, loss of lock).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A spec, config or argument violated an invariant.
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    /// A file, stream or record could not be read, written or trusted.
    #[error("data error: {0}")]
    Data(String),

    /// A numeric invariant failed (non-finite value, degenerate correlator, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Error::Data(message.into())
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Error::Numeric(message.into())
    }

    /// Stable process exit code for this error kind.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation { .. } => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
