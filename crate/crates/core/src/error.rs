use thiserror::Error;

/// Library-wide error type. Configuration and data errors are recoverable
/// (callers can fix inputs and retry); contract violations indicate misuse of
/// an API and carry enough text to locate the offending call.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unknown task: {0}")]
    UnknownTask(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
