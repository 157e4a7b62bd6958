//! Structure-aware residual pyramid network for monocular depth estimation,
//! with a procedural RGBD dataset, multi-scale training objective, evaluation
//! metrics, and a training harness — all on a CPU-friendly `f64` substrate
//! with finite-difference-verified gradients.

pub mod adff;
pub mod encoder;
pub mod error;
pub mod model;
pub mod nn;
pub mod rpd;
pub mod params;

pub use error::{Error, Result};
