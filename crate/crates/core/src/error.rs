//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for the fusion pipeline.
#[derive(Error, Debug)]
pub enum Error {
    /// Paired images do not share dimensions.
    #[error("paired images differ in size: {mri_h}x{mri_w} vs {func_h}x{func_w}")]
    PairDimension {
        mri_h: usize,
        mri_w: usize,
        func_h: usize,
        func_w: usize,
    },
    /// An image file could not be read or decoded.
    #[error("cannot decode {path}: {reason}")]
    Decode { path: String, reason: String },
    /// Crop augmentation requires an exact input size.
    #[error("crop augmentation needs a 256x256 pair, got {h}x{w}")]
    CropSize { h: usize, w: usize },
    /// Tensor shape mismatch.
    #[error("shape error: {0}")]
    Shape(String),
    /// Invalid model or run configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Image too small for the requested operation.
    #[error("size error: {0}")]
    Size(String),
    /// A numerical computation produced a non-finite or degenerate result.
    #[error("numerics error: {0}")]
    Numerics(String),
    /// Checkpoint file is corrupt or from an incompatible version.
    #[error("checkpoint error: {0}")]
    CheckpointVersion(String),
    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 usage/config, 3 data, 4 numerics.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numerics(_) => 4,
            _ => 3,
        }
    }
}
