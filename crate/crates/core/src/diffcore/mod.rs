//! Dense `f64` tensors, a reverse-mode tape and a finite-difference checker.

mod gradcheck;
pub(crate) mod linalg;
mod tape;
mod tensor;

pub use gradcheck::{
    analytic_gradient, evaluate, grad_check, max_relative_error, numeric_gradient,
};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
