//! Dense tensors and tape-based reverse-mode differentiation.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_errors};
pub use ops::{log_sum_exp, softmax_in_place, Primitive, ScalarFunction};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
