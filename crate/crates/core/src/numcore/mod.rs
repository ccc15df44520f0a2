//! Dense arrays, a reverse-mode autodiff tape, named parameter sets and a
//! finite-difference gradient checker.

mod array;
mod gradcheck;
mod params;
mod tape;

pub use array::Array;
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use params::{Gradients, ParamId, ParameterSet};
pub use tape::{Axis, Tape, Var, PROB_FLOOR};

#[allow(unused_imports)]
pub(crate) use tape::{log_sum_exp, sigmoid, softmax_rows};
