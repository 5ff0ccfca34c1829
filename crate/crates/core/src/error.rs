use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error in {path}: {message}")]
    Integrity { path: PathBuf, message: String },

    #[error("weight transfer failed: {0}")]
    Transfer(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numeric guard: {0}")]
    NumericGuard(String),

    #[error("import failed: {0}")]
    Import(String),

    #[error("checkpoint corrupted: {0}")]
    Corruption(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: u64, reason: String },

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

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Argument(msg()))
    }
}
