//! Error type shared across the toolkit.

use thiserror::Error;

/// Errors produced by the denoising toolkit.
#[derive(Debug, Error)]
pub enum YondError {
    /// Image dimensions violate a precondition (odd size, kernel larger than image, ...).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Two arrays that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Underlying file I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Raw file metadata is missing or inconsistent with the payload.
    #[error("metadata error: {0}")]
    Metadata(String),

    /// Not enough samples to perform an operation.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Regression input cannot determine the model (e.g. all means identical).
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    /// A numeric argument is outside its admissible range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// External denoiser process failed (nonzero exit, broken pipe, ...).
    #[error("denoiser bridge error: {0}")]
    Bridge(String),

    /// External denoiser wire protocol violation (bad magic, shape mismatch, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Invalid configuration (file syntax, contradictory settings, ...).
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, YondError>;
