//! Dense `f64` arrays and reverse-mode differentiation.

mod buffer;
mod gradcheck;
mod tape;

pub use buffer::NdBuffer;
pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};

pub(crate) use buffer::finite_or_err;
