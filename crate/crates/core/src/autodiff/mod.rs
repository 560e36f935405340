//! Dense `f64` tensors and a tape-style reverse-mode differentiation graph.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, GradCheck};
pub use graph::{Conv2dParams, Gradients, Graph, Var};
pub use kernels::conv_out_extent;
pub use tensor::Tensor;
