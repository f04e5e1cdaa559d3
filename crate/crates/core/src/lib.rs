//! Token-sparsified adapter fine-tuning for Vision Transformers.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks); the aliases below name the concrete instances.

pub mod adapter;
pub mod attn;
pub mod autograd;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod cost;
pub mod data;
pub mod engine;
pub mod error;
pub mod scalar;
pub mod sparsify;
pub mod tensor;
pub mod vit;

pub use autograd::{Graph, RowPlan, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
