use thiserror::Error;

use crate::document::{DocumentError, TreeError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: field `{field}`: {message}")]
    Format { line: usize, field: &'static str, message: String },
    #[error("line {line}: {source}")]
    InvalidDocument { line: usize, source: DocumentError },
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<(usize, usize)> },
    #[error("invalid transition {transition}: {reason}")]
    InvalidTransition { transition: String, reason: &'static str },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}
