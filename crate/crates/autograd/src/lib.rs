//! Tensors and reverse-mode automatic differentiation, generic over `f32`/`f64`.
//!
//! [`Tensor`] is a dense row-major array. A [`Graph`] records operations on
//! [`Var`] handles and differentiates a scalar root with [`Graph::backward`].
//! Trainable values live in a [`ParamStore`] and are updated by [`Adam`].

mod graph;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{ConvSpec, Graph, Var};
pub use optim::{clip_grad_norm, Adam};
pub use params::{Gradients, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::{broadcast_shape, numel, ShapeError, Tensor};
