use thiserror::Error;

/// Errors raised by the adaptation engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExclError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric fault: {0}")]
    NumericFault(String),

    /// The requested synthetic benchmark cannot be built with the given settings.
    #[error("benchmark construction failed: {0}")]
    BenchmarkConstruction(String),
}

pub type Result<T> = std::result::Result<T, ExclError>;

pub(crate) fn invalid(msg: impl Into<String>) -> ExclError {
    ExclError::InvalidArgument(msg.into())
}

pub(crate) fn ensure_same_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(invalid(format!("{what}: length mismatch ({a} vs {b})")));
    }
    Ok(())
}
