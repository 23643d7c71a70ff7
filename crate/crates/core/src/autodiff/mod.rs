//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! matrices.
//!
//! A [`Graph`] records kernels in execution order. Each kernel validates
//! operand shapes, rejects non-finite outputs, and remembers enough of its
//! inputs to run its backward rule. [`Graph::backward`] walks the tape once
//! in reverse.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradReport, ParamCheck};
pub use graph::{Graph, Var, MASK_LOGIT};
pub use tensor::Tensor;
