//! Acceptance run: one line per criterion, non-zero exit if any fails.

mod support;

use std::alloc::{GlobalAlloc, Layout, System};
use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use cpc_core::bench::run_bench;
use cpc_core::lifting::check_liftable;
use cpc_core::runtime::{linearity_violations, lower, run, ExitStatus, RunOptions};
use cpc_core::semantics::{
    check_liftable_core, interpreter_suite, invariant_counts, lift_core, lifting_suite, run_naive, run_opt,
    with_big_stack, Profile,
};
use cpc_core::{compile, name, parse, FunDecl, FunKind, Stage, Term, Value};

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, l: Layout) -> *mut u8 {
        let p = System.alloc(l);
        if !p.is_null() {
            let now = CURRENT.fetch_add(l.size(), Ordering::Relaxed) + l.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, p: *mut u8, l: Layout) {
        System.dealloc(p, l);
        CURRENT.fetch_sub(l.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, p: *mut u8, l: Layout, new: usize) -> *mut u8 {
        let q = System.realloc(p, l, new);
        if !q.is_null() {
            if new >= l.size() {
                let now = CURRENT.fetch_add(new - l.size(), Ordering::Relaxed) + new - l.size();
                PEAK.fetch_max(now, Ordering::Relaxed);
            } else {
                CURRENT.fetch_sub(l.size() - new, Ordering::Relaxed);
            }
        }
        q
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn interpreters() -> Outcome {
    let t = Instant::now();
    let r = with_big_stack(|| interpreter_suite(0..1000, Profile::Any, 100_000));
    let took = t.elapsed();
    for (seed, d) in r.failures.iter().take(3) {
        eprintln!("seed {seed}:\n{d}");
    }
    check(
        r.passed() && r.programs == 1000 && took < Duration::from_secs(60),
        format!(
            "{}/{} agree ({} without a value), {} disagree, {}",
            r.agreed,
            r.checked,
            r.no_value,
            r.failures.len(),
            secs(took)
        ),
    )
}

fn lifting() -> Outcome {
    let t = Instant::now();
    let r = with_big_stack(|| lifting_suite(0..1000, Profile::Liftable, 100_000));
    let took = t.elapsed();
    for (seed, d) in r.failures.iter().take(3) {
        eprintln!("seed {seed}:\n{d}");
    }
    check(
        r.passed() && r.checked > 0 && r.inapplicable == 0 && took < Duration::from_secs(60),
        format!(
            "{} programs, {}/{} lifted parameters agree, {} disagree, {}",
            r.programs,
            r.agreed,
            r.checked,
            r.failures.len(),
            secs(took)
        ),
    )
}

fn fun(n: &str, ps: &[&str], body: Term) -> FunDecl {
    FunDecl::new(n, FunKind::Cps, ps, body)
}

/// letrec f(rc) = (letrec set() = rc := 0 in letrec done() = rc in (set(); done())) in f(5)
fn counterexample() -> Term {
    let set = fun("set", &[], Term::assign("rc", Term::int(0)));
    let done = fun("done", &[], Term::var("rc"));
    let body = Term::letrec(
        vec![set],
        Term::letrec(
            vec![done],
            Term::seq(Term::call("set", vec![]), Term::call("done", vec![])),
        ),
    );
    Term::letrec(vec![fun("f", &["rc"], body)], Term::call("f", vec![Term::int(5)]))
}

fn necessity() -> Outcome {
    let t = counterexample();
    let hset: BTreeSet<_> = [name("set"), name("done")].into_iter().collect();
    let accepted = check_liftable_core(&t, "rc", "f", &hset);
    let before = run_naive(&t, 10_000, false).result.map(|(v, _)| v);
    let after = run_naive(&lift_core(&t, "rc", &hset), 10_000, false).result.map(|(v, _)| v);

    let path = support::goldens_dir().join("counterexample.cpl");
    let p = parse(&std::fs::read_to_string(path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let report = check_liftable(&p);
    let v = report.verdict("f", "rc").cloned();
    let witness = v.as_ref().and_then(|v| v.witness.clone());
    // the non-tail call `set();` is on line 11
    let at_set = witness.as_ref().is_some_and(|(h, s)| &**h == "set" && s.line == 11);
    check(
        !accepted && before == Ok(Value::Int(0)) && after == Ok(Value::Int(5)) && at_set,
        format!("original {before:?}, force-lifted {after:?}, refused with witness {witness:?}"),
    )
}

fn goldens() -> Outcome {
    let mut done = Vec::new();
    for case in ["linear", "loop", "rc_done"] {
        support::golden(case)?;
        done.push(case);
    }
    Ok(format!("explicit, split and lifted forms match for {}", done.join(", ")))
}

fn stores() -> Outcome {
    let h = fun("h", &[], Term::var("x"));
    let g = fun("g", &["x"], Term::letrec(vec![h], Term::call("h", vec![])));
    let gh = Term::letrec(vec![g], Term::call("g", vec![Term::int(1)]));
    let hset: BTreeSet<_> = [name("h")].into_iter().collect();
    let lifted = lift_core(&gh, "x", &hset);
    let store = |t: &Term, opt: bool| {
        let r = if opt { run_opt(t, 1000, false) } else { run_naive(t, 1000, false) };
        r.result.map(|(v, s)| (v, s.values()))
    };
    let one = Value::Int(1);
    let want = [
        (store(&gh, false), Ok((one, vec![one]))),
        (store(&lifted, false), Ok((one, vec![one, one]))),
        (store(&gh, true), Ok((one, vec![]))),
        (store(&lifted, true), Ok((one, vec![]))),
    ];
    let got: Vec<_> = want.iter().map(|(g, _)| g.clone()).collect();
    check(
        want.iter().all(|(g, w)| g == w),
        format!("naive {:?} / {:?}, optimised {:?} / {:?}", got[0], got[1], got[2], got[3]),
    )
}

fn corpus() -> Outcome {
    let cases = support::corpus();
    let mut bad = Vec::new();
    for c in &cases {
        let (rt, reference) = support::run_both(c, false);
        if rt.status != ExitStatus::Clean || rt.output != reference.output || rt.status != reference.status {
            bad.push(c.name.clone());
            eprintln!("{}: runtime {:?} {:?}\n  reference {:?} {:?}", c.name, rt.status, rt.output, reference.status, reference.output);
        }
    }
    check(
        cases.len() >= 20 && bad.is_empty(),
        format!("{} programs, {} differ {:?}", cases.len(), bad.len(), bad),
    )
}

const DEPTH_BOUND: usize = 4;

fn trampoline() -> Outcome {
    let src = "cps int count(int n, int acc) { if (n == 0) return acc; return count(n - 1, acc + 1); }
               cps int main(int n) { return count(n, 0); }";
    let c = compile(src, Stage::Cps).map_err(|e| e.to_string())?;
    let code = lower(c.cps.as_ref().unwrap()).map_err(|e| e.to_string())?;
    let n = 10_000_000;
    let t = Instant::now();
    let r = run(&code, &RunOptions { args: vec![Value::Int(n)], ..Default::default() });
    let took = t.elapsed();
    check(
        r.result == Some(Value::Int(n))
            && r.stats.max_trampoline_depth <= DEPTH_BOUND
            && took < Duration::from_secs(30),
        format!(
            "{} frames, max host depth {} (bound {DEPTH_BOUND}), {}",
            r.stats.frames,
            r.stats.max_trampoline_depth,
            secs(took)
        ),
    )
}

fn threads() -> Outcome {
    let src = "cps void t() { sleep(1000); }
               cps int main(int n) { int i = 0; while (i < n) { spawn t(); i = i + 1; } sleep(2000); return i; }";
    let c = compile(src, Stage::Cps).map_err(|e| e.to_string())?;
    let code = lower(c.cps.as_ref().unwrap()).map_err(|e| e.to_string())?;
    let n: usize = 100_000;
    let opts = RunOptions {
        args: vec![Value::Int(n as i64)],
        workers: Some(1),
        ..Default::default()
    };
    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let t = Instant::now();
    let r = run(&code, &opts);
    let took = t.elapsed();
    let per = (PEAK.load(Ordering::Relaxed) - base) as f64 / n as f64;
    check(
        r.status == ExitStatus::Clean && r.stats.peak_threads > n && per <= 1024.0 && took < Duration::from_secs(10),
        format!(
            "{} threads alive at peak, {per:.0} bytes per thread, {}",
            r.stats.peak_threads,
            secs(took)
        ),
    )
}

fn bench() -> Outcome {
    let rows = run_bench(1.0, 5);
    let ns = |n: &str| rows.iter().find(|r| r.name == n).map(|r| r.ns_per_iter);
    let names: Vec<&str> = rows.iter().map(|r| r.name).collect();
    for r in &rows {
        println!("    {r}");
    }
    let (call, cps, switch) = (ns("call"), ns("cps-call"), ns("switch"));
    let ok = names == ["loop", "call", "cps-call", "switch", "cond", "spawn"]
        && matches!((call, cps), (Some(a), Some(b)) if b > a)
        && matches!((switch, cps), (Some(s), Some(c)) if s / c < 10.0);
    check(
        ok,
        format!(
            "cps-call/call {:.2}, switch/cps-call {:.2}",
            cps.unwrap_or(0.0) / call.unwrap_or(1.0),
            switch.unwrap_or(0.0) / cps.unwrap_or(1.0)
        ),
    )
}

fn invariants() -> Outcome {
    let inv = invariant_counts();
    let linear = linearity_violations();
    let mut nondeterministic = Vec::new();
    let scripted = support::corpus();
    for c in &scripted {
        let (a, ra) = support::run_both(c, true);
        let (b, rb) = support::run_both(c, true);
        if a.trace != b.trace || ra.trace != rb.trace || a.trace.is_empty() {
            nondeterministic.push(c.name.clone());
        }
    }
    check(
        inv.aliasing_checks > 0
            && inv.compact_checks > 0
            && inv.aliasing_violations == 0
            && inv.compact_violations == 0
            && linear == 0
            && scripted.iter().any(|c| !c.script.events.is_empty())
            && nondeterministic.is_empty(),
        format!(
            "aliasing {}/{} checks fired, compactness {}/{}, linearity {linear}, {} programs replayed under their scripts, {} differ",
            inv.aliasing_violations,
            inv.aliasing_checks,
            inv.compact_violations,
            inv.compact_checks,
            scripted.len(),
            nondeterministic.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("naive and optimised interpreters agree", interpreters),
        ("lifting liftable parameters preserves values", lifting),
        ("lifting a non-tail-called function changes the result", necessity),
        ("listing goldens", goldens),
        ("worked example stores", stores),
        ("corpus runtime output equals reference output", corpus),
        ("trampoline depth stays bounded", trampoline),
        ("memory per sleeping thread", threads),
        ("primitive benchmark ratios", bench),
        ("invariant counters and determinism", invariants),
    ];
    let mut failed = 0;
    for (i, (title, f)) in criteria.iter().enumerate() {
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match out {
            Ok(d) => println!("criterion {:>2} PASS  {title}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {title}: {d}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
