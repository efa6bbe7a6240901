//! Adversarial training with a frequency-domain regularizer on a small CNN,
//! plus the attacks and spectral analyses used to evaluate it.
//!
//! Everything runs on the CPU in `f64` with handwritten forward and backward
//! passes; there is no autodiff or GPU dependency.

pub mod analysis;
pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{Architecture, ModelParams};
pub use tensor::Tensor;
