//! Image I/O and evaluation plumbing behind the `himamba` binary.

pub mod eval;
pub mod io;

pub use eval::{run_eval, EvalOptions, EvalReport, EvalRow};
