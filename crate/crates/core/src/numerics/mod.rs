//! Dense tensors and reverse-mode differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{
    finite_diff_check, finite_diff_check_with, relative_error, GradCheckEntry, GradCheckReport,
};
pub use graph::{Activation, ElementwiseOp, Graph, GraphNode, Provenance, Var};
pub use tensor::Tensor;

