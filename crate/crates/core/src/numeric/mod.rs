//! Dense arrays, reverse-mode differentiation and finite-difference checking.

mod array;
pub mod gradcheck;
mod tape;

pub use array::{gelu, sigmoid, softplus, Array};
pub use gradcheck::{grad_check, loss_fn, BlockReport, GradCheckOptions, GradCheckReport, Tolerance};
pub use tape::{Gradients, Tape, Var};
