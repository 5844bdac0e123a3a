//! Crate-wide error type with stable exit-code categories for the CLI.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed scan {path}: size {size} is not a multiple of 16 bytes")]
    MalformedScan { path: PathBuf, size: u64 },

    #[error("corrupt scan {path}: non-finite coordinate at point {index}")]
    CorruptScan { path: PathBuf, index: usize },

    #[error("malformed label file {path}: size {size} is not a multiple of 4 bytes")]
    MalformedLabels { path: PathBuf, size: u64 },

    #[error("length mismatch: {left} points vs {right} labels")]
    LengthMismatch { left: usize, right: usize },

    #[error("class config error: {0}")]
    ConfigValidation(String),

    #[error("point with zero range cannot be projected")]
    DegeneratePoint,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("{count} targets exceed {queries} queries; matching requires T <= Q")]
    OverSubscribed { count: usize, queries: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("fixture error: {0}")]
    Fixture(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI. 0 is success, 1 is reserved for
    /// unexpected failures; every category below has a distinct code.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigValidation(_) | Error::State(_) => 2,
            Error::EmptyDataset(_) | Error::Dataset(_) => 3,
            Error::Pairing(_) | Error::LengthMismatch { .. } => 4,
            Error::Fixture(_) => 5,
            Error::NonFinite(_) | Error::Numeric(_) => 6,
            Error::MalformedScan { .. }
            | Error::CorruptScan { .. }
            | Error::MalformedLabels { .. } => 7,
            Error::Shape(_) | Error::DegeneratePoint | Error::OverSubscribed { .. } => 8,
            Error::Io { .. } => 9,
        }
    }
}
