use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("precondition error: {0}")]
    Precondition(String),
    #[error("state error: {0}")]
    State(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("hash mismatch: {0}")]
    HashMismatch(String),
    #[error("non-finite loss at step {step} (last finite loss {last_finite:?})")]
    NonFiniteLoss { step: usize, last_finite: Option<f64> },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable short tag used as the machine-parsable prefix of CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Domain(_) => "domain",
            Error::Numeric(_) | Error::NonFiniteLoss { .. } => "numeric",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Precondition(_) => "precondition",
            Error::State(_) => "state",
            Error::Format(_) => "format",
            Error::HashMismatch(_) => "hash-mismatch",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
