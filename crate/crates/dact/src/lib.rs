//! Blind restoration of images degraded by spatial downsampling composed
//! with an unknown monotone intensity transform.
//!
//! The estimated image and a pixel-wise blending weight map are jointly
//! optimized inside a plug-and-play half-quadratic-splitting loop driven by
//! deterministic DDIM sampling. The unknown contrast map is re-estimated
//! every inner iteration as the monotone look-up table induced by entropic
//! optimal transport between the soft histograms of the current estimate
//! and the measurement.

pub mod error;
pub mod histogram;
pub mod io;
pub mod metrics;
pub mod priors;
pub mod simulate;
pub mod sinkhorn;
pub mod solver;
pub mod tensor;
pub mod transport;

pub mod cli;

pub use error::{Error, Result};
pub use tensor::{Image, Rng, WeightMap};
