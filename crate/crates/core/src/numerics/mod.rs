//! Dense tensors, reverse-mode differentiation and serialization.

pub mod gradcheck;
pub mod graph;
pub mod io;
mod kernels;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::{finite_diff_grad, forward_backward, rel_error, Bindings};
pub use graph::{ConvSpec, Grads, Graph, Var};
pub use params::ParamStore;
pub use tensor::Tensor;
