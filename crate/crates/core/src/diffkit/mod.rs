//! Dense tensors with reverse-mode gradients, forward-mode JVPs, stop-gradient,
//! and a splittable counter-based random stream.
//!
//! Both differentiation modes read from the same primitive table
//! ([`Prim`]); a [`Var`] carries its primal, an optional tangent, and the
//! primitive record needed for the backward pass.

mod prim;
mod rng;
mod tensor;
mod var;

pub use prim::Prim;
pub(crate) use prim::sigmoid;
pub use rng::{gaussian, label, RngStream};
pub use tensor::Tensor;
pub use var::{grad, jvp, stop_gradient, Grads, Graph, GraphNode, Var};

