use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error in {context}: {message}")]
    Schema { context: String, message: String },
    #[error("unsupported schema version {found} (supported: {supported})")]
    UnsupportedSchema { found: u32, supported: u32 },
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown class index {index} (dataset has {classes} classes)")]
    UnknownClass { index: usize, classes: usize },
    #[error("shape mismatch: expected {expected}, got {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("non-finite value during {stage}: {detail}")]
    NonFinite { stage: String, detail: String },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged {
        epoch: usize,
        loss: f64,
        manifest: String,
    },
    #[error("alignment is singular: {0}")]
    Singular(String),
    #[error("class count mismatch: {left} vs {right}")]
    ClassCountMismatch { left: usize, right: usize },
    #[error("query failed: {0}")]
    Query(String),
    #[error("invalid probability rows: {0}")]
    InvalidProbabilities(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}
