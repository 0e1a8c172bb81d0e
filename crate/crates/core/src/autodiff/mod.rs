//! Dense tensors with reverse-mode differentiation over the op set the
//! pipeline uses, plus a finite-difference checker.

pub mod conv;
mod graph;
mod gradcheck;

pub use graph::{Graph, NodeId};
pub(crate) use graph::dice_ce_terms;
pub use gradcheck::{grad_check, grad_check_inputs, relative_error, GradCheckOptions, GradCheckReport};
