use thiserror::Error;

/// Errors raised anywhere in the library. Each variant names the failure class
/// the caller is expected to branch on; the payload is a human-readable diagnostic.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("state error: {0}")]
    State(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("task error: {0}")]
    Task(String),
    #[error("camera error: {0}")]
    Camera(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("vocabulary error: unknown instruction {0:?}")]
    Vocabulary(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
