use std::path::PathBuf;

use nirgan_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {}: {detail}", path.display())]
    Decode { path: PathBuf, detail: String },
    #[error("training diverged at step {step}: non-finite {term}")]
    Divergence { term: String, step: u64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(TensorError),
}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Shape { op, detail } => Error::Shape(format!("{op}: {detail}")),
            other => Error::Tensor(other),
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
