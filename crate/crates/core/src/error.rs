use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("ingestion error in {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid phantom spec: {0}")]
    Spec(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("spatial alignment error: {0}")]
    Alignment(String),
    #[error("training diverged at epoch {epoch}, step {step}: total loss {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("unknown {kind} '{name}' (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn ingest(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Ingestion {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Divergence { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
