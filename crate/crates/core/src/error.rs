use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Design matrix has fewer than 7 rows or is rank deficient.
    #[error("degenerate gradient scheme: {0}")]
    DegenerateScheme(String),

    #[error("invalid gradient scheme: {0}")]
    InvalidScheme(String),

    /// Returned by single-voxel fitting when the signal cannot be log-linearized.
    #[error("voxel skipped: {0}")]
    VoxelSkipped(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid architecture: {0}")]
    Architecture(String),

    /// Non-finite loss or parameters during optimization.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error in {path}: {message} (at byte {offset})")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("png encoding error: {0}")]
    Png(#[from] png::EncodingError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }

    /// Data and validation problems are distinguished from numerical failures
    /// so callers (the CLI) can map them onto separate exit codes.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}
