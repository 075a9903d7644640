use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value or combination of values outside an operation's domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },

    /// Malformed binary or text file.
    #[error("format error: {0}")]
    Format(String),

    #[error("stale latent cache: {0}")]
    StaleCache(String),

    /// Two consecutive grid steps with the same half-log-SNR.
    #[error("degenerate grid: zero step size between t={t} and t={t_prev}")]
    DegenerateGrid { t: usize, t_prev: usize },

    #[error("noise source exhausted at step index {0}")]
    NoiseExhausted(usize),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("setup error: {0}")]
    Setup(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
