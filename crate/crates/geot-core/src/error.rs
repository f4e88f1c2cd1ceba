//! Error taxonomy shared by every module in the crate.
//!
//! Variants map one-to-one onto the CLI exit codes: configuration, parse,
//! and I/O problems are usage errors (exit 2), while `Numerical` signals a
//! non-finite value or a diverged computation (exit 3). Check failures such
//! as a gradient mismatch are reported through result types, not errors.

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value, unknown key, or missing input.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed text input; `line` is 1-based within `path`.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// Argument outside its documented domain (e.g. sigma <= 0).
    #[error("parameter error: {0}")]
    Param(String),

    /// Incompatible array dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite loss, gradient, or parameter; `context` names the value.
    #[error("numerical failure in {context}: {message}")]
    Numerical { context: String, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for a parse error at a known line.
    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Shorthand for a numerical failure tagged with its source.
    pub fn numerical(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            message: message.into(),
        }
    }
}
