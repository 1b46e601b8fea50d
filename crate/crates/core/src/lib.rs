//! Cross-timestep self-calibration of diffusion cross-attention, at desk scale.
//!
//! A small text-to-image diffusion model is trained on synthetic scenes whose
//! ground-truth masks are known exactly. Attention maps extracted at a
//! low-noise timestep supervise the maps at the sampled (noisier) timestep.

pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod loss;
pub mod model;
pub mod prompts;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
