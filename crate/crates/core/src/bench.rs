//! Micro-benchmarks of the thread primitives: each row is one small
//! program run on the runtime with a fixed iteration count, timed with the
//! monotonic clock. The best of several repetitions is kept.

use std::fmt;
use std::time::{Duration, Instant};

use crate::pipeline::{compile, Stage};
use crate::lang::Value;
use crate::runtime::{lower, run, Code, ExitStatus, RunOptions};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub name: &'static str,
    pub ns_per_iter: f64,
    pub iterations: u64,
}

impl fmt::Display for BenchRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<10}{:>12.2} ns{:>12} iterations", self.name, self.ns_per_iter, self.iterations)
    }
}

/// Each program runs `n` iterations of the measured operation.
pub const PROGRAMS: [(&str, &str); 6] = [
    (
        "loop",
        "int spin(int n) { int i = 0; while (i < n) { i = i + 1; } return i; }
         cps int main(int n) { return spin(n); }",
    ),
    (
        "call",
        "int id(int x) { return x; }
         int spin(int n) { int i = 0; while (i < n) { i = id(i) + 1; } return i; }
         cps int main(int n) { return spin(n); }",
    ),
    (
        "cps-call",
        "cps int id(int x) { return x; }
         cps int main(int n) { int i = 0; while (i < n) { i = id(i); i = i + 1; } return i; }",
    ),
    (
        "switch",
        "cps void t(int n) { int i = 0; while (i < n) { yield(); i = i + 1; } }
         cps int main(int n) { spawn t(n / 2); t(n / 2); return 0; }",
    ),
    (
        "cond",
        "int turn = 0;
         int c0 = 0;
         int c1 = 0;
         cps void p(int me, int n) {
             int i = 0;
             while (i < n) {
                 while (turn != me) { if (me == 0) wait(c0); else wait(c1); }
                 turn = 1 - me;
                 if (me == 0) signal(c1); else signal(c0);
                 i = i + 1;
             }
         }
         cps int main(int n) { c0 = cond_new(); c1 = cond_new(); spawn p(1, n / 2); p(0, n / 2); return 0; }",
    ),
    (
        "spawn",
        "int live = 0;
         cps void t() { live = live - 1; }
         cps int main(int n) { int i = 0; while (i < n) { live = live + 1; spawn t(); i = i + 1; } while (live > 0) yield(); return 0; }",
    ),
];

/// Iterations per row: at least a million for the sequential rows and a
/// hundred thousand for the thread rows, times `scale`.
pub fn iterations(name: &str, scale: f64) -> u64 {
    let base = match name {
        "loop" | "call" | "cps-call" => 1_000_000.0,
        _ => 100_000.0,
    };
    ((base * scale) as u64).max(2)
}

pub fn prepare(src: &str) -> Code {
    let c = compile(src, Stage::Cps).expect("bench program compiles");
    lower(c.cps.as_ref().expect("cps stage")).expect("bench program lowers")
}

/// Run `code` once with argument `n` and return the wall time.
pub fn time_once(code: &Code, n: u64) -> Duration {
    let opts = RunOptions {
        args: vec![Value::Int(n as i64)],
        workers: Some(1),
        ..Default::default()
    };
    let t = Instant::now();
    let r = run(code, &opts);
    let d = t.elapsed();
    assert_eq!(r.status, ExitStatus::Clean, "bench program failed");
    d
}

/// All six rows, sequentially, each the minimum of `reps` runs.
pub fn run_bench(scale: f64, reps: usize) -> Vec<BenchRow> {
    PROGRAMS
        .iter()
        .map(|(name, src)| {
            let code = prepare(src);
            let n = iterations(name, scale);
            let best = (0..reps.max(1)).map(|_| time_once(&code, n)).min().unwrap_or_default();
            BenchRow {
                name,
                ns_per_iter: best.as_nanos() as f64 / n as f64,
                iterations: n,
            }
        })
        .collect()
}

/// One line describing the host.
pub fn machine_info() -> String {
    format!(
        "{} {} cpus={}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        std::thread::available_parallelism().map_or(1, |n| n.get())
    )
}
