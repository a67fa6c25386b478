use flowsr_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("format error in {field}: {msg}")]
    Format { field: &'static str, msg: String },
    #[error("checkpoint error in segment {segment}: {msg}")]
    Checkpoint { segment: String, msg: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric-domain error: {0}")]
    Numeric(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Dimension(m) => Error::Dimension(m),
            TensorError::Usage(m) => Error::Usage(m),
            TensorError::NonFinite(m) => Error::Numeric(format!("non-finite value in {m}")),
        }
    }
}

impl Error {
    pub(crate) fn format(field: &'static str, msg: impl Into<String>) -> Self {
        Error::Format { field, msg: msg.into() }
    }

    pub fn checkpoint(segment: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Checkpoint { segment: segment.into(), msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
