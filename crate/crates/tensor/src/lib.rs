//! Minimal CPU tensor engine with reverse-mode autodiff.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the two concrete instantiations.

pub mod blob;
mod error;
pub mod graph;
pub mod kernels;
pub mod nn;
mod scalar;
mod tensor;

pub use error::TensorError;
pub use graph::{Gradients, Graph, Var};
pub use kernels::CropBox;
pub use nn::{Adam, Bound, Conv2d, Param, ParamId, ParamStore};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
