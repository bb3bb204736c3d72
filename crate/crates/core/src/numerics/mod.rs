//! Dense matrices, a reverse-mode tape, and finite-difference checking.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{grad_check, grad_check_guarded, GradCheckReport, REL_FLOOR};
pub use matrix::Matrix;
pub use tape::{column_moments, Axis, Gradients, Message, MessageList, Reduction, Tape, Var};
