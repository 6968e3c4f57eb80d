//! Minimal tensor and reverse-mode autodiff engine.
//!
//! Everything the generative models need and nothing more: broadcasting
//! element-wise arithmetic, dense layers, im2col convolutions, nearest
//! upsampling, average pooling, axis reductions and Adam. Batched kernels
//! fan out over samples through [`par`], which uses rayon when the
//! `parallel` feature is enabled.

mod error;
mod float;
pub mod graph;
pub mod kernels;
mod optim;
pub mod par;
mod params;
mod tensor;

pub use error::TensorError;
pub use float::{gemm, Float, MatRef};
pub use graph::{Grads, Graph, Unary, Var};
pub use optim::Adam;
pub use params::{Bound, ParamGrads, ParamSet};
pub use tensor::Tensor;
