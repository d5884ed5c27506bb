//! Minimal reverse-mode differentiation: only the operators the denoiser
//! needs, each with an exact hand-written backward.

pub mod conv;
pub mod ops;
pub mod params;
pub mod tape;

pub use conv::conv2d;
pub use ops::{avg_pool2, resample2x, upsample2, Activation, Resample};
pub use params::{Param, ParamStore};
pub use tape::{BackCtx, Backward, Gradients, Tape, Var};
