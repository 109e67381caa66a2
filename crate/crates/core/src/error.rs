use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by tensor primitives and the gradient tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Domain { op, detail: detail.into() }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid domain spec: {0}")]
    Spec(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate embedding: row {row} has norm {norm:e}")]
    DegenerateEmbedding { row: usize, norm: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at {stage} step {step}: {detail}")]
    Training { stage: &'static str, step: usize, detail: String },
    #[error("clustering failed: {0}")]
    Clustering(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
