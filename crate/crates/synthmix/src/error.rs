use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A file or byte stream does not match its declared format.
    #[error("format error: {0}")]
    Format(String),

    /// Two inputs that must agree (counts, shapes, label spaces) do not.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// A sampling request exceeds what the source can supply.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A scalar argument lies outside its admissible range.
    #[error("range error: {0}")]
    Range(String),

    /// An array shape does not match the operation's input contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// Training produced a non-finite loss.
    #[error("divergence at epoch {epoch}, batch {batch}: {msg}")]
    Divergence {
        epoch: usize,
        batch: usize,
        msg: String,
    },

    /// A numerical routine left its validity envelope.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An experiment config failed validation before any work started.
    #[error("invalid config: {0}")]
    Validation(String),

    #[error("io error at {path}: {source}")]
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
}
