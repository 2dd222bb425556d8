use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite value in '{0}'")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("missing required column '{0}'")]
    MissingColumn(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("training diverged: {0}")]
    Training(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("baseline error: {0}")]
    Baseline(String),
    #[error("unable to access '{path}': {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
