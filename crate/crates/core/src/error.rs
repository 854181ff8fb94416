use std::path::PathBuf;

use thiserror::Error;

/// Coarse failure category, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Data,
    Numerical,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Data => "data",
            Category::Numerical => "numerical",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("point {point:?} outside grid of dims {dims:?}")]
    OutOfBounds { point: [f64; 3], dims: [usize; 3] },
    #[error("no voxel exceeds threshold {0}")]
    EmptyRegion(f64),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("empty overlap between fixed and moving images")]
    EmptyOverlap,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Config(_) | Error::InvalidGrid(_) | Error::Protocol(_) => Category::Config,
            Error::NotPositiveDefinite | Error::Numerical(_) | Error::Optimizer(_) => Category::Numerical,
            Error::OutOfBounds { .. }
            | Error::EmptyRegion(_)
            | Error::Domain(_)
            | Error::Data(_)
            | Error::EmptyOverlap
            | Error::UnsupportedDatatype(_)
            | Error::Corrupt { .. }
            | Error::Format(_)
            | Error::Io { .. } => Category::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
