//! Dense tensors and a define-by-run reverse-mode differentiation tape.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GRADCHECK_FLOOR};
pub use graph::{BatchStats, Gradients, Graph, NormStats, Var, BATCH_NORM_EPS, NORMALIZE_EPS};
pub(crate) use tensor::gemm;
pub use tensor::Tensor;
