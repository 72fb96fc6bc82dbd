//! Dense tensors, reverse-mode autodiff and the finite-difference oracle.

pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use params::{flatten, Binder, Linear};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::{
    add, concat, div, exp, matmul, mul, sigmoid, sigmoid_scalar, silu, slice, softmax_last, sub,
    sum_axis, transpose, Tensor,
};
