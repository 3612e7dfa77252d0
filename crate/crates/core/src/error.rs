use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid radius range [{r_min}, {r_max}]: need 0 <= r_min < r_max <= 1")]
    InvalidRadius { r_min: f64, r_max: f64 },

    #[error("invalid model configuration: {0}")]
    InvalidModel(String),

    #[error("stale step cache: cache is for position {cache}, network state is at position {current}")]
    StaleCache { cache: u64, current: u64 },

    #[error("step {step} outside schedule range [0, {total}]")]
    ScheduleRange { step: usize, total: usize },

    #[error("{0} is an offline rule and cannot be streamed")]
    OfflineRule(&'static str),

    #[error("{path}:{line}: {message}")]
    Config {
        path: String,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset file: {0}")]
    Dataset(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
