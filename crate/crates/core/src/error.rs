use thiserror::Error;

/// Errors raised by the estimator library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is singular or not positive definite: {0}")]
    Singular(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("rejection sampling exhausted after {0} attempts")]
    RetryCapExhausted(usize),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
