//! Reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod primitive;

pub use gradcheck::{gradient_check, gradient_check_store};
pub use graph::{Gradients, Graph, ParamKey, ParamStore, Parameter, Var};
pub use kernels::{sigmoid, softplus};
pub use primitive::{Padding, Primitive};
