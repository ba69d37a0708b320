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

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("item `{item}` is assigned to conflicting providers `{first}` and `{second}`")]
    ConflictingProvider {
        item: String,
        first: String,
        second: String,
    },

    #[error("dataset is empty after filtering")]
    EmptyDataset,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("zero-probability term in KL divergence: {0}")]
    ZeroProbability(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::ConflictingProvider { .. } => "conflicting_provider",
            Error::EmptyDataset => "empty_dataset",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::Diverged(_) => "diverged",
            Error::ZeroProbability(_) => "zero_probability",
            Error::Checkpoint(_) => "checkpoint",
            Error::Serde(_) => "serde",
            Error::Stage { .. } => "stage",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
