//! Dense matrices, a plain evaluator and a reverse-mode tape.

mod gradcheck;
mod graph;
mod matrix;
mod tape;

pub use gradcheck::{
    gradient_check, gradient_check_with, EntryError, GradCheckOptions, GradCheckReport, FD_STEP,
};
pub use graph::{Eval, Graph, PROB_FLOOR};
pub use matrix::{Matrix, Real};
pub use tape::{Gradients, OpKind, Tape, Var};

pub(crate) use graph::nll_value as graph_nll;
pub(crate) use matrix::dot;
