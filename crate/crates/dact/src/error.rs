use std::path::PathBuf;
use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header in {path}: {detail}")]
    MalformedHeader { path: PathBuf, detail: String },

    #[error("dimension mismatch: header promises {expected} values, payload has {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),

    #[error("dimensions {h}x{w} not divisible by factor {k}")]
    NonDivisible { h: usize, w: usize, k: usize },

    #[error("empty image")]
    EmptyImage,

    #[error("transport plan row {0} has zero mass")]
    ZeroRow(usize),

    #[error("sinkhorn potentials became non-finite (epsilon too small for this cost range?)")]
    SinkhornNonFinite,

    #[error("image too small for the {win}x{win} SSIM window: {h}x{w}")]
    ImageTooSmall { h: usize, w: usize, win: usize },

    #[error("invalid diffusion step indices: t={t} must exceed t_prev={t_prev} and both must be in schedule range")]
    InvalidStep { t: usize, t_prev: usize },

    #[error("external denoiser protocol violation: {0}")]
    ProtocolViolation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
