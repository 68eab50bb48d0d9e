use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not satisfy an operation's contract.
    #[error("{op}: shape error: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation produced (or was handed) a NaN or infinity.
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    /// A vector with (near-)zero norm where a direction is required.
    #[error("{op}: degenerate vector (norm below 1e-12)")]
    Degenerate { op: &'static str },

    /// More ground-truth items than prediction slots.
    #[error("matching needs at least {needed} queries, model has {available}")]
    Capacity { needed: usize, available: usize },

    /// Invalid configuration value or malformed config file.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid class vocabulary (duplicates, bad split, missing names).
    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    /// Malformed on-disk data (images, checkpoints, datasets).
    #[error("format error: {0}")]
    Format(String),

    /// Checkpoint magic/version not understood by this build.
    #[error("unsupported checkpoint version: {0}")]
    Version(String),

    /// Training aborted because the loss left the finite range.
    #[error("non-finite loss at iteration {iteration}")]
    Training { iteration: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
