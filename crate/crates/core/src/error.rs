//! Shared error type for the whole crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A record or document could not be decoded.
    #[error("parse error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, msg: String },

    /// An invariant, precondition, or configuration rule was violated.
    #[error("validation error: {0}")]
    Validation(String),

    /// An endpoint replied, but the reply does not have the required shape.
    #[error("format error: {0}")]
    Format(String),

    /// An endpoint could not be reached or kept failing after retries.
    #[error("transport error after {attempts} attempt(s): {msg}")]
    Transport { attempts: usize, msg: String },

    /// A judge reply could not be turned into a score.
    #[error("scoring error: {0}")]
    Scoring(String),

    /// A loss mask selected no positions.
    #[error("empty mask: {0}")]
    EmptyMask(String),

    /// A rendered example exceeds the configured maximum length.
    #[error("sequence of {actual} tokens exceeds max length {max_len}")]
    Truncation { actual: usize, max_len: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(format!("csv: {e}"))
    }
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn parse_at(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line: Some(line),
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI: validation-ish failures map to 1,
    /// transport failures to 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Transport { .. } => 2,
            _ => 1,
        }
    }
}
