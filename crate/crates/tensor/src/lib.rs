//! A small reverse-mode automatic differentiation engine over dense `f64`
//! tensors.
//!
//! Tensors are immutable and reference counted. Every operation whose inputs
//! require a gradient records itself on the result, so calling
//! [`Tensor::backward`] on a scalar walks the recorded graph and returns the
//! gradient of every leaf that was created with [`Tensor::variable`].
//! Operations on constant tensors record nothing, which makes inference free
//! of graph bookkeeping.
//!
//! Images and feature maps are laid out channel-first as `C×H×W` without a
//! batch axis.

mod backward;
mod gemm;
mod ops;
mod spatial;
mod tensor;

pub mod gradcheck;
pub mod optim;
pub mod params;

pub use backward::Gradients;
pub use optim::{clip_global_norm, Adam, AdamState};
pub use params::{BoundParams, Param, ParamSet};
pub use tensor::Tensor;
