use std::path::PathBuf;

/// Errors produced by the geometry, field, rendering and persistence layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input violated a documented precondition.
    #[error("domain error: {0}")]
    Domain(String),
    /// A point projected onto or behind the image plane.
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    /// Parameters or intermediate values were not finite.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
