use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("infeasible solution: {0}")]
    Feasibility(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("decoding invariant violated: {0}")]
    Decode(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("degenerate baseline: {0}")]
    Baseline(String),

    #[error("instance too large for exact solver: n = {n}, limit = {limit}")]
    TooLarge { n: usize, limit: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("incompatible file: {0}")]
    Incompatible(String),

    #[error("corrupted file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse { line, message: message.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
