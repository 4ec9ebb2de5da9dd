//! A compiler from a small C dialect with cooperative threads to
//! continuation-passing form, plus its runtime and two reference semantics.

pub mod bench;
pub mod boxing;
pub mod cps;
pub mod frontend;
pub mod lang;
pub mod lifting;
pub mod pipeline;
pub mod runtime;
pub mod semantics;
pub mod splitting;

pub use frontend::{parse, print, ParseError};
pub use pipeline::{compile, CompileError, Compiled, Stage};
pub use lang::*;
