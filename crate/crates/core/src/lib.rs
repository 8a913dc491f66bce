//! Probabilistic forecasting of chaotic dynamics on unstructured meshes with
//! preconditioned graph diffusion models, score-based data assimilation from
//! sparse sensors, and adaptive sensor placement.
//!
//! The numerical core is generic over [`Real`] (`f32` / `f64`); the aliases
//! at the crate root fix the scalar for everyday use.

pub mod datagen;
pub mod denoiser;
pub mod error;
pub mod graphmesh;
pub mod sampler;
pub mod scalar;
pub mod schedules;
pub mod sensing;
pub mod tensors;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor64 = tensors::Tensor<f64>;
pub type Tensor32 = tensors::Tensor<f32>;
