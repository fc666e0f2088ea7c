use std::io;

use thiserror::Error;

/// Errors surfaced by the library.
///
/// `Config` covers bad user-supplied settings; `Contract` covers inputs that
/// violate an operation's preconditions (shape mismatches, out-of-range ids).
#[derive(Debug, Error)]
pub enum TclError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("interrupted: {0}")]
    Interrupted(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, TclError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TclError::Config(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TclError::Contract(msg.into()))
}
