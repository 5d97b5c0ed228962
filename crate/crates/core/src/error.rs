use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are split by who can fix them: `Io`, `Csv`, `Parse`, `Validation`
/// and `Config` indicate bad input (CLI exit code 1), while `Numerical` marks
/// an internal failure of a sampler or solver (exit code 2).
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    /// A malformed field or record, reported with its file and line number.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("invalid data: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Numerical failure inside a sampler or solver.
    #[error("{0}")]
    Numerical(String),
}

impl Error {
    /// CLI exit code: 1 for user errors, 2 for internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
