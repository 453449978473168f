use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to decode record `{id}`: {msg}")]
    Decode { id: String, msg: String },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("adaptor role violation: expected {expected:?}, got {actual:?}")]
    RoleViolation {
        expected: crate::adaptation::AdaptorRole,
        actual: crate::adaptation::AdaptorRole,
    },
    #[error("synthesis backend unavailable for triplet `{triplet}` (retriable): {msg}")]
    BackendUnavailable { triplet: String, msg: String },
    #[error("generated image for triplet `{triplet}` rejected: {msg}")]
    Rejected { triplet: String, msg: String },
    #[error("training aborted: {0}")]
    Training(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("metric undefined: {0}")]
    Metric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether retrying the same operation may succeed.
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::BackendUnavailable { .. })
    }
}
