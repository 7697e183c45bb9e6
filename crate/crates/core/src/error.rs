use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An input violates an operation precondition (e.g. reflection pad wider than the image).
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// The caller broke an API contract (non-scalar loss, non-finite latent, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad format: {0}")]
    Format(String),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint config mismatch: file has {found}, expected {expected}")]
    ConfigMismatch { found: String, expected: String },

    #[error("training diverged at epoch {epoch}, batch {batch} (lr {lr}): {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        lr: f64,
        detail: String,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("image error in {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
