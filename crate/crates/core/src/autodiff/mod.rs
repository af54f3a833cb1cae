//! Minimal dense reverse-mode automatic differentiation.

pub mod gradcheck;
pub mod params;
pub mod tape;

pub use gradcheck::{grad_check, grad_check_store, GradCheckReport, GradMismatch};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{add_all, concat_cols, stack_rows, Gradients, Tape, Var};
