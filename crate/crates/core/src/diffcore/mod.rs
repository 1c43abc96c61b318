//! Dense 4-D tensors with a tape for reverse-mode differentiation,
//! restricted to the ops the Siamese network and its losses need.

pub mod checkpoint;
mod element;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use element::{DType, Element};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub(crate) use graph::{normalized_row_sum, row_scale};
pub use graph::{BatchMoments, Gradients, Graph, Reduction, Var, ROW_NORM_FLOOR};
pub use tensor::{Shape, Tensor};
