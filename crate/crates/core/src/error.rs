use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum RaciError {
    #[error("index out of range: {0}")]
    Range(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("attention over an empty key set")]
    EmptyKeys,
    #[error("degenerate batch: no observed positions")]
    DegenerateBatch,
    #[error("retrieval pool is stale: built for {built}, parameters are {current}")]
    StalePool { built: String, current: String },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("non-finite analytic gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("{file}: {msg}")]
    Load { file: String, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RaciError>;

impl RaciError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        RaciError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
