//! Multimodal medical image fusion: a trainable invertible-dense-network
//! fusion model with multi-scale complementary feature extraction, an
//! adaptive data-driven loss, and a complete fusion-quality metric suite.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod invertible;
pub mod loss;
pub mod mcfem;
pub mod metrics;
pub mod nn;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
