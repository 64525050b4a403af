use std::path::PathBuf;

use crate::colorspace::ColorSpace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid color space: expected {expected}, found {found}")]
    InvalidColorSpace { expected: ColorSpace, found: ColorSpace },

    #[error("unsupported color conversion {from} -> {to}")]
    InvalidColorPair { from: ColorSpace, to: ColorSpace },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("spatial grids differ: {a:?} vs {b:?}")]
    GridMismatch { a: (usize, usize), b: (usize, usize) },

    #[error("linear system is singular or ill-conditioned (rcond {rcond:e})")]
    SingularSystem { rcond: f64 },

    #[error("score set has no {0} samples")]
    MissingClass(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing forward cache: {0}")]
    MissingCache(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid dataset: {0}")]
    Data(String),

    #[error("manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },

    #[error("need at least {need} groups to split, got {got}")]
    TooFewGroups { need: usize, got: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used to map failures onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::InvalidColorPair { .. } | Error::Json(_) => ErrorKind::Config,
            Error::SingularSystem { .. } | Error::NonFinite(_) | Error::MissingCache(_) => {
                ErrorKind::Numeric
            }
            Error::ShapeMismatch(_) | Error::GridMismatch { .. } => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}
