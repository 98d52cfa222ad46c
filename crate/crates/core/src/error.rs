use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("corrupt tensor: {0}")]
    Corruption(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("manifest error: duplicate category_id {0}")]
    DuplicateCategory(u32),

    #[error("parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("memory budget of {budget} bytes is below one row of {row_bytes} bytes")]
    Budget { budget: u64, row_bytes: u64 },

    #[error("no descriptors to aggregate")]
    EmptyDescriptors,

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("item {index}: {source}")]
    Item {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from bad input (as opposed to an environment
    /// failure such as a disk error).
    pub fn is_invalid_input(&self) -> bool {
        match self {
            Error::Io { source, .. } => source.kind() == io::ErrorKind::NotFound,
            Error::Item { source, .. } => source.is_invalid_input(),
            _ => true,
        }
    }
}
