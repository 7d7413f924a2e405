//! Minimal dense reverse-mode differentiation.

mod graph;
mod gradcheck;
mod kernels;

pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use graph::{Gradients, Graph, Primitive, Unary, Var};
