//! Adversarial-robustness lab for input-discretized and binarized MLPs.
//!
//! * [`tensor`]: dense `f32` tensors, seeded RNG, and per-op gradient rules.
//! * [`data`]: MNIST IDX loading, pixel-depth discretization, batching.
//! * [`network`]: full-precision and binarized fully connected networks.
//! * [`attacks`]: FGSM and R-FGSM white-box adversaries.
//! * [`experiments`]: training, ε sweeps, activation-norm analysis, reports.

pub mod attacks;
pub mod data;
pub mod error;
pub mod experiments;
pub mod network;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
