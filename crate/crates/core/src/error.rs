use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("resample error: {0}")]
    Resample(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("loss error: {0}")]
    Loss(String),

    #[error("gradient penalty error: {0}")]
    Penalty(String),

    #[error("state error: {0}")]
    State(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at scale {scale}, iteration {iteration}: {detail}")]
    Divergence { scale: usize, iteration: usize, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
