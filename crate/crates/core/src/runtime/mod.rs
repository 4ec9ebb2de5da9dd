//! Cooperative scheduler and the trampoline that executes converted programs.

mod code;
mod cont;
mod exec;
mod sched;

pub use code::{lower, Code, Heap, LowerError, RtError};
pub use cont::{linearity_violations, Continuation, Top};
pub use exec::{run, run_program, scheduler_effect, ExitReport, ExitStatus, RunOptions, RunStats};
pub use sched::*;
