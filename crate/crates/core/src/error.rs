use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CrlError {
    /// An argument lies outside the domain where a map is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// Two agents (or an agent and its host) coincide, so a distance or
    /// its gradient is undefined.
    #[error("degenerate geometry: {0}")]
    Geometry(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error on {path}: {message}")]
    Serialization { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, CrlError>;

impl CrlError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CrlError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn ser(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        CrlError::Serialization {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize, context: &'static str) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(CrlError::Dimension { expected, got, context })
    }
}
