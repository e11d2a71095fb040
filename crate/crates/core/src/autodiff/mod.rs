//! Reverse-mode differentiation over dense tensors, finite-difference
//! checking, and the maskable AdamW optimizer.

mod gradcheck;
mod graph;
mod optim;

pub use gradcheck::{
    gradient_check, gradient_check_inputs, relative_error, CheckOptions, GradCheckReport, TensorCheck,
};
pub use graph::{Backward, Graph, NodeId};
#[allow(unused_imports)]
pub(crate) use graph::{gelu, softmax_in_place};
pub use optim::{AdamW, AdamWConfig};
