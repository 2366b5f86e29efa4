//! Building blocks for training low bit-width CNNs with collaborative
//! multi-teacher knowledge distillation.
//!
//! Everything is generic over the [`Scalar`] type (`f32` or `f64`); the
//! aliases at the bottom of this file fix one or the other.

mod error;
mod graph;
mod params;
mod scalar;
mod tensor;

pub mod distill;
pub mod fusion;
pub mod logits;
pub mod net;
pub mod ops;
pub mod quant;

pub use error::{Error, Result};
pub use graph::{Graph, HwgqTap, Var};
pub use params::{Param, ParamId, ParamRole, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
