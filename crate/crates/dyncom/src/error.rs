use std::io;

use thiserror::Error;

fn fmt_line(line: &Option<usize>) -> String {
    match line {
        Some(n) => format!(" at line {n}"),
        None => String::new(),
    }
}

/// Errors surfaced by the library.
///
/// The command-line front end maps these onto exit codes: configuration and
/// usage problems exit 1, input data problems exit 2, numerical or internal
/// failures exit 3.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Input text could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Input parsed but failed validation.
    #[error("invalid data{}: {msg}", fmt_line(line))]
    Validation { line: Option<usize>, msg: String },

    /// The model state reached a configuration with no valid update.
    #[error("model degeneracy: {0}")]
    Degenerate(String),

    /// An internal bookkeeping invariant failed; the state may be corrupt.
    #[error("internal inconsistency: {0}")]
    Inconsistency(String),

    /// A requested metric is undefined for the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Run configuration problem (bad flag, key, or combination).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Shorthand for validation errors tied to an input line.
    pub fn at_line(line: usize, msg: impl Into<String>) -> Self {
        Error::Validation { line: Some(line), msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
