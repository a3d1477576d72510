//! Dense reverse-mode automatic differentiation with exact Hessian-vector
//! products (double backward).

mod graph;
pub mod finite_diff;
mod tensor;

pub use graph::{sigmoid, softplus, Graph, HessianOperator, Var};
pub use tensor::Tensor;
