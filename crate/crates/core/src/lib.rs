//! Mean-reverting conditional diffusion for multi-temporal cloud removal.
//!
//! The crate covers the synthetic scene generator, the noise schedule, the
//! multi-temporal conditional denoiser, the cloud-aware loss, the
//! deterministic resampling sampler with its structural guides, a small
//! masked-autoencoder prior, image-quality metrics and the training loop.

pub mod cloudloss;
pub mod dresample;
pub mod error;
pub mod maeprior;
pub mod metrics;
pub mod mtcdn;
pub mod nn;
pub mod rng;
pub mod scenegen;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
