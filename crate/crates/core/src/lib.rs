//! Topology-aware retinal artery/vein segmentation.

pub mod autograd;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod tffm;
pub mod trainer;

pub use error::{Error, Result};
pub use mask::{Mask, ProbMap};
pub use tensor::Tensor;
