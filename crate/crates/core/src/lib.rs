//! Spiking multi-task deep Q-learning: integrate-and-fire networks with
//! context-gated active dendrites, trained round-robin over several games,
//! plus the supervised multi-task classifier built from the same parts.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used for training.

pub mod classify;
pub mod envs;
pub mod gradcheck;
pub mod error;
pub mod models;
pub mod rl;
pub mod scalar;
pub mod snn;
pub mod state;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training precision.
pub type Real = f32;
/// Precision used by gradient checks.
pub type CheckReal = f64;

pub type Tensor = tensor::Tensor<Real>;
pub type QNetwork = models::QNetwork<Real>;
pub type Trainer = rl::Trainer<Real>;
pub type ClassifyTrainer = classify::ClassifyTrainer<Real>;
