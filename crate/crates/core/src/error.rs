use std::io;

use thiserror::Error;

/// Errors produced by the engine. Each variant maps to one exit-code class
/// in the command-line front end.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent dimensions, out-of-range settings, unusable config files.
    #[error("configuration error: {0}")]
    Config(String),

    /// A stream record that could not be decoded or failed validation.
    #[error("parse error at line {line} (frame {frame}) in `{field}`: {message}")]
    Parse {
        line: usize,
        frame: String,
        field: String,
        message: String,
    },

    /// A well-formed stream whose records violate cross-frame invariants.
    #[error("stream error at frame {frame_id}: {message}")]
    Stream { frame_id: u64, message: String },

    /// Malformed model file.
    #[error("model format error: {0}")]
    Format(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    /// A caller broke an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short class name, stable across releases.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Stream { .. } => "stream",
            Error::Format(_) => "format",
            Error::Eval(_) => "eval",
            Error::Contract(_) => "contract",
            Error::Io(_) => "io",
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Parse { .. } | Error::Stream { .. } => 3,
            Error::Format(_) => 4,
            Error::Eval(_) => 5,
            Error::Contract(_) => 6,
            Error::Io(_) => 7,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_mismatch(what: &str, expected: usize, got: usize) -> Error {
    Error::Config(format!(
        "{what}: dimension mismatch (expected {expected}, got {got})"
    ))
}
