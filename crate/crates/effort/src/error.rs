use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("pretraining failed: {0}")]
    Pretrain(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Config, validation and format problems are the caller's fault; the rest are runtime failures.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Validation(_) | Error::Config(_) | Error::Format(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}
