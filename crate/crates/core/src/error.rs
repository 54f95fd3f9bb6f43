use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("manifest row {row}: {msg}")]
    Manifest { row: usize, msg: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{0}")]
    Range(String),

    #[error("{path}: {msg}")]
    Cache { path: PathBuf, msg: String },

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("empty evaluation")]
    EmptyEvaluation,

    #[error("training failed: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Errors caused by bad user input (configuration, manifests, flags)
    /// rather than by a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Manifest { .. } | Error::Invalid(_) | Error::Range(_))
    }

    pub(crate) fn cache(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Cache { path: path.into(), msg: msg.into() }
    }
}
