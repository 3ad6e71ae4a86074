use std::io;

use thiserror::Error;

/// Coarse failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Validation,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("no annotations")]
    NoAnnotations,

    #[error("invalid soft label: {0}")]
    InvalidSoftLabel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("class-count mismatch: model has {model} classes, request has {requested}")]
    ClassCountMismatch { model: usize, requested: usize },

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("malformed table: {0}")]
    Table(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io(_) => ErrorClass::Io,
            Error::NonFinite(_) => ErrorClass::Numeric,
            _ => ErrorClass::Validation,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
