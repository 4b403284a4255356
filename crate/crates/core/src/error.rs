use thiserror::Error;

/// Errors raised by the occupancy engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("voxel index ({i}, {j}, {k}) out of bounds for a {w}x{h}x{z} (WxHxZ) grid")]
    OutOfBounds {
        i: usize,
        j: usize,
        k: usize,
        w: usize,
        h: usize,
        z: usize,
    },
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error in `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("training diverged at epoch {epoch}, step {step} (loss = {loss})")]
    Divergence { epoch: usize, step: usize, loss: f64 },
    #[error("range error: {0}")]
    Range(String),
    #[error("malformed container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(message: impl Into<String>) -> Self {
        Error::Shape(message.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
