use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed meta.json in {path}: {message}")]
    Meta { path: PathBuf, message: String },

    #[error("field `{field}`: expected {expected} values, found {found}")]
    ShapeMismatch {
        field: String,
        expected: usize,
        found: usize,
    },

    #[error("field `{field}` contains a non-finite value at flat index {index}")]
    NonFinite { field: String, index: usize },

    #[error("field `{field}` violates an invariant: {reason}")]
    Invariant { field: String, reason: String },

    #[error("required field `{0}` is missing")]
    MissingField(String),

    #[error("no valid points: {0}")]
    NoValidPoints(&'static str),

    #[error("optimizer diverged: total loss increased for {0} consecutive accepted steps")]
    Diverged(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate scene: {0}")]
    DegenerateScene(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invariant(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invariant {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
