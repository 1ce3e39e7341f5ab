//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records operations eagerly as they run; [`Graph::backward`]
//! sweeps the record in reverse to produce exact gradients for every leaf
//! created with `requires_grad`. Reductions use a fixed order, so two
//! identical runs give bit-identical gradients.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod ops;
mod tensor;

pub use gradcheck::{check_gradients, check_gradients_at};
pub use graph::{Gradients, Graph, Var};
pub use ops::composite_ray;
pub use tensor::{Scalar, Tensor};

#[cfg(test)]
mod tests;
