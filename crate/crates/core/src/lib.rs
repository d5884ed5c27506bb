//! Video denoising with learned deformable spatio-temporal kernels.
//!
//! A U-Net predicts, for every output pixel, fractional sampling offsets
//! around a rigid tap lattice plus per-tap weights. The reference frame is
//! reconstructed as the weighted sum of trilinear samples from the noisy
//! frame stack. Everything is `f64` and differentiated by a small tape.

pub mod autodiff;
pub mod checkpoint;
pub mod color_noise;
pub mod config;
pub mod dataio;
pub mod deform;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod par;
pub mod resampling;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
