use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the numeric engine, the data layer and the training loop.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violates an invariant (non-finite values, overlapping masks, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A file does not follow its declared format.
    #[error("format error: {0}")]
    Format(String),

    /// An API was used outside its contract (non-scalar loss, consumed tape, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at epoch {epoch}, batch {batch} (largest parameter norm {param_norm:.4e} in `{param}`)")]
    NonFinite { epoch: usize, batch: usize, param: String, param_norm: f64 },

    /// A checkpoint does not match the model or data it is applied to.
    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    /// Synthetic data generation gave up.
    #[error("generation error: {0}")]
    Generation(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
