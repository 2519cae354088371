//! Video depth estimation by conditional flow matching on latent depth, at
//! toy scale: a small UNet with temporal rotary attention, variable-length
//! training, keyframe interpolation for long clips, and depth metrics.

// `!(x > 0.0)` is how validation rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod denoiser;
pub mod depthspace;
pub mod duration;
pub mod datapipe;
pub mod error;
pub mod eval;
pub mod flow;
pub mod infer;
pub mod longvideo;
pub mod metrics;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
pub use numerics::Tensor;
