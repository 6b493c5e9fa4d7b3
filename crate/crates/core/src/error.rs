use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A file or byte stream did not match the expected layout.
    #[error("format error: {0}")]
    Format(String),
    /// Data violated a structural invariant (shapes, ids, label ranges).
    #[error("validation error: {0}")]
    Validation(String),
    /// A caller-supplied argument violated an operation's precondition.
    #[error("argument error: {0}")]
    Argument(String),
    /// An embedding could not be normalized because it was the zero vector.
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
