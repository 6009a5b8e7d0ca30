//! Dense `f64` tensors, a reverse-mode tape and the finite-difference oracle.

mod gemm;
pub mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_at, finite_diff_gradient, max_relative_error, relative_error, REL_ERR_FLOOR};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
