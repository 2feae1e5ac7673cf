//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by quantization, autodiff, kernels and model I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Sub-channel split requested on a channel length the block size does
    /// not divide (and padding was not enabled).
    #[error("block size mismatch: {0}")]
    BlockSizeMismatch(String),

    #[error("non-finite weights")]
    NonFiniteWeights,

    #[error("invalid scheme: {0}")]
    InvalidScheme(String),

    #[error("code {code} out of range for {bits}-bit packing")]
    CodeOutOfRange { code: i8, bits: u8 },

    #[error("loss must be a scalar, got {0} elements")]
    NonScalarLoss(usize),

    #[error("malformed model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
