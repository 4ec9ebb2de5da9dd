//! Shared fixtures for the primitive benchmarks.

use cpc_core::bench::{prepare, PROGRAMS};
use cpc_core::runtime::Code;

/// Lowered code of every benchmark program with a per-sample iteration
/// count small enough for criterion's sampling.
pub fn fixtures() -> Vec<(&'static str, Code, u64)> {
    PROGRAMS
        .iter()
        .map(|(name, src)| {
            let n = match *name {
                "loop" | "call" | "cps-call" => 10_000,
                _ => 1_000,
            };
            (*name, prepare(src), n)
        })
        .collect()
}
