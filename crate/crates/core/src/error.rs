use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument lies outside the domain on which the operation is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// A measure, grid, path or table failed validation at construction.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A simulation produced a non-finite value and was aborted.
    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
