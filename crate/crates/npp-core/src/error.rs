//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the library.
///
/// The CLI maps [`Error::Config`] and [`Error::Argument`] to exit code 2
/// (user/configuration error) and everything else to exit code 1.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/layer shapes do not chain; carries the offending layer index.
    #[error("dimension error at layer {layer}: expected width {expected}, got {got}")]
    LayerDimension {
        layer: usize,
        expected: usize,
        got: usize,
    },

    /// Generic shape incompatibility outside a layered model.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid argument to an operation (empty batch, out-of-range code, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input file (bad magic, ragged CSV, truncated checkpoint).
    #[error("format error: {0}")]
    Format(String),

    /// Stored data failed a consistency check (e.g. corrupted code index).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A computation produced a non-finite value where finiteness is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Operation not defined for the requested quantization format.
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors the CLI reports as configuration mistakes (exit 2).
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Argument(_))
    }
}
