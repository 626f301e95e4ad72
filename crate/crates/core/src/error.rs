use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across ingestion, training, generation and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("temporal leak: prompt time {time} is not before current task {current}")]
    TemporalLeak { time: usize, current: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("stream continuity: {0}")]
    StreamContinuity(String),
    #[error("missing checkpoint for task {task}: {path}")]
    MissingCheckpoint { task: usize, path: PathBuf },
    #[error("invalid checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("plot: {0}")]
    Plot(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
