//! Reverse- and forward-mode differentiation over dense `f64` tensors.
//!
//! Graphs are built by running the model code against a [`Graph`]; every
//! builder call evaluates eagerly and records the op. [`Graph::backward`]
//! and [`Graph::vjp`] run the reverse pass, [`Graph::jvp`] pushes tangents
//! forward through the same record.

mod checkpoint;
mod derivatives;
pub mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use checkpoint::{ParamStore, CHECKPOINT_MAGIC};
pub use derivatives::{
    directional_second_derivative, directional_second_derivative_with_center, hessian_contraction, jacobian,
    jacobian_of,
};
pub use graph::{Gradients, Graph, Tangents, Var};
pub use tensor::Tensor;

