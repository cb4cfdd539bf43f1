use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at iteration {iteration} in {term}")]
    NonFinite { iteration: usize, term: String },

    #[error(transparent)]
    GridFile(#[from] GridFileError),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("dataset {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures reading a `.vxgr` grid file. Each variant maps to a distinct
/// [`GridFileError::code`].
#[derive(Debug, Error)]
pub enum GridFileError {
    #[error("grid file not found: {0}")]
    Missing(PathBuf),

    #[error("bad magic bytes {found:?} (expected \"VXGR\")")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported grid format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated grid file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("grid dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("grid checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl GridFileError {
    pub fn code(&self) -> u32 {
        match self {
            GridFileError::Missing(_) => 1,
            GridFileError::BadMagic { .. } => 2,
            GridFileError::UnsupportedVersion(_) => 3,
            GridFileError::Truncated { .. } => 4,
            GridFileError::DimensionMismatch(_) => 5,
            GridFileError::Checksum { .. } => 6,
            GridFileError::Io(_) => 7,
        }
    }
}
