//! Gaussian mixture mask attention at desk scale.
//!
//! Masks built from a handful of `(α, σ)` Gaussian kernels are multiplied into
//! the scaled attention scores of a small Vision Transformer. The crate covers
//! mask construction and its analytic gradients, a manually differentiated
//! ViT with mixture, element-wise or no masks, fitting mixtures to dense
//! masks, synthetic and CIFAR-10 data, and checkpointing.

pub mod attention;
pub mod data;
pub mod error;
pub mod fitting;
pub mod gradcheck;
pub mod io;
pub mod mask;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
