use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("cohort error: {0}")]
    Cohort(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("weights format error: {0}")]
    Format(String),

    #[error("stale cache: {0}")]
    StaleCache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArg(msg.into())
    }
}
