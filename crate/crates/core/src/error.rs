use alloc::string::String;

/// Errors raised by the numeric and protocol core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite value encountered in {0}")]
    Numeric(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("signature verification failed")]
    BadSignature,
    #[error("protocol violation: {0}")]
    Protocol(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
