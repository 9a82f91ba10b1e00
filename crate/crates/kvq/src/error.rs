//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any layer of the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension disagreement between operands.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Input contained NaN or infinity where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Matrix failed the symmetry check required for SPD inputs.
    #[error("matrix not symmetric: {0}")]
    NotSymmetric(String),

    /// Cholesky pivot was not strictly positive; the caller owns any
    /// regularization policy.
    #[error("matrix not positive definite: pivot {pivot} at index {index}")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    /// Triangular solve hit a zero diagonal entry.
    #[error("zero diagonal entry at index {0} in triangular solve")]
    ZeroDiagonal(usize),

    /// Empty input where at least one element is required.
    #[error("empty input: {0}")]
    Empty(String),

    /// Configuration value outside its documented range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Codeword index outside the codebook.
    #[error("codeword index {index} out of range for codebook of size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    /// Cosine similarity is undefined for zero-norm codewords.
    #[error("zero-norm codeword at row {0}")]
    ZeroNormCodeword(usize),

    /// Training could not proceed (e.g. fewer keys than codewords).
    #[error("training failed: {0}")]
    Training(String),

    /// Malformed binary or text file.
    #[error("format error: {0}")]
    Format(String),

    /// Experiment-level contract violation or missing input.
    #[error("experiment error: {0}")]
    Experiment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
