//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An argument lies outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value appeared during evaluation.
    #[error("numeric fault: {0}")]
    Numeric(String),

    /// Configuration rejected before any work started.
    #[error("invalid configuration: {0}")]
    Validation(String),

    /// Feature requested that the current model or mode does not provide.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A persisted file failed its integrity checks.
    #[error("integrity error in section `{section}`: {detail}")]
    Integrity { section: String, detail: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn integrity(section: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Integrity {
            section: section.into(),
            detail: detail.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
