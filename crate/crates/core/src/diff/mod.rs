//! Reverse-mode differentiation over dense `f64` arrays.

mod check;
mod tape;
mod tensor;

pub use check::{finite_difference_check, grad};
pub use tape::{CustomOp, Diagnostics, Gradients, Tape, Var, EPS_DIV};
pub(crate) use tape::logistic;
pub use tensor::Tensor;
