//! Channel and spatial attention for small CNN backbones: a reverse-mode
//! autodiff core, five mini backbone families with named hook points, a
//! placement-plan language, and a deterministic training and evaluation
//! pipeline.

pub mod attention;
pub mod autograd;
pub mod backbone;
pub mod data;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod param;
pub mod plan;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
