use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("invalid depth {0}; depth must be positive")]
    InvalidDepth(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("unknown class id {0}; register it with add_class first")]
    UnknownClass(u16),

    #[error("class id {0} is already registered")]
    DuplicateClass(u16),

    #[error("no pixels of class {0} in the supplied frames")]
    NoClassPixels(u16),

    #[error("loss is not a scalar (shape {0}x{1})")]
    NotScalar(usize, usize),

    #[error("rank-deficient point set: {0}")]
    RankDeficient(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed file {path} at byte {offset}: {reason}")]
    Malformed {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, offset: u64, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            offset,
            reason: reason.into(),
        }
    }
}
