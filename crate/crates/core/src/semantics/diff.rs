//! Differential harnesses comparing the interpreters with each other and a
//! term with its lifted form.

use std::collections::BTreeSet;

use super::gen::{gen_term, Profile};
use super::lift::liftable_targets;
use super::{check_liftable_core, core_str, lift_core, run_naive, run_opt, EvalError, Run, Store};
use crate::lang::{Name, Term, Value};

#[derive(Clone, Debug)]
pub enum Diff2 {
    Agree {
        outcome: Result<Value, EvalError>,
        naive_store: Option<Store>,
    },
    Disagree(String),
}

impl Diff2 {
    pub fn agrees(&self) -> bool {
        matches!(self, Diff2::Agree { .. })
    }
}

fn report(t: &Term, naive: &Run, other_name: &str, other: &Run) -> String {
    let mut s = format!("term: {}\nnaive: {:?}\n{other_name}: {:?}\n", core_str(t), naive.result, other.result);
    s.push_str("-- naive derivation\n");
    for l in &naive.trace {
        s.push_str(l);
        s.push('\n');
    }
    s.push_str(&format!("-- {other_name} derivation\n"));
    for l in &other.trace {
        s.push_str(l);
        s.push('\n');
    }
    s
}

/// Naive and optimised evaluation from empty environments agree, and the
/// optimised store ends empty.
pub fn diff_theorem2(t: &Term, fuel: u64) -> Diff2 {
    let n = run_naive(t, fuel, false);
    let o = run_opt(t, fuel, false);
    let verdict = match (&n.result, &o.result) {
        (Err(a), Err(b)) if a == b => Ok(Err(a.clone())),
        (Ok((v, s)), Ok((w, so))) if v == w && so.is_empty() => Ok(Ok((*v, s.clone()))),
        (Ok((v, _)), Ok((w, so))) if v == w => Err(format!("optimised store not empty: {so:?}")),
        _ => Err("outcomes differ".to_string()),
    };
    match verdict {
        Ok(Ok((v, s))) => Diff2::Agree {
            outcome: Ok(v),
            naive_store: Some(s),
        },
        Ok(Err(e)) => Diff2::Agree {
            outcome: Err(e),
            naive_store: None,
        },
        Err(why) => {
            let n = run_naive(t, fuel, true);
            let o = run_opt(t, fuel, true);
            Diff2::Disagree(format!("{why}\n{}", report(t, &n, "optimised", &o)))
        }
    }
}

#[derive(Clone, Debug)]
pub enum Diff1 {
    Agree(Result<Value, EvalError>),
    Disagree(String),
    /// The parameter is not liftable.
    Inapplicable,
    /// The original term does not terminate within the fuel budget.
    Diverges,
}

/// Lifting `x` out of the inner functions `hset` of `g` preserves the
/// value of `t`. Stores are not compared: the lifted run allocates more.
pub fn diff_theorem1(t: &Term, x: &str, g: &str, hset: &BTreeSet<Name>, fuel: u64) -> Diff1 {
    if !check_liftable_core(t, x, g, hset) {
        return Diff1::Inapplicable;
    }
    let lifted = lift_core(t, x, hset);
    let orig = run_naive(t, fuel, false);
    let Ok((v, _)) = &orig.result else {
        return match orig.result {
            Err(EvalError::OutOfFuel) => Diff1::Diverges,
            _ => compare_stuck(t, &lifted, &orig, fuel),
        };
    };
    // Passing the extra argument costs one step per call.
    let l = run_naive(&lifted, fuel.saturating_mul(2), false);
    match &l.result {
        Ok((w, _)) if w == v => Diff1::Agree(Ok(*v)),
        _ => {
            let o = run_naive(t, fuel, true);
            let l = run_naive(&lifted, fuel.saturating_mul(2), true);
            Diff1::Disagree(format!("lifted: {}\n{}", core_str(&lifted), report(t, &o, "lifted", &l)))
        }
    }
}

fn compare_stuck(t: &Term, lifted: &Term, orig: &Run, fuel: u64) -> Diff1 {
    let l = run_naive(lifted, fuel.saturating_mul(2), false);
    if let Err(e @ EvalError::Stuck(_)) = l.result {
        Diff1::Agree(Err(e))
    } else {
        Diff1::Disagree(format!(
            "original stuck, lifted not\n{}",
            report(t, orig, "lifted", &l)
        ))
    }
}

/// Size passed to the generator by the suites.
pub const SUITE_TERM_SIZE: usize = 40;

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub programs: u64,
    /// Comparisons made: one per program for the interpreter suite, one per
    /// liftable parameter for the lifting suite.
    pub checked: u64,
    pub agreed: u64,
    /// Runs that ended out of fuel or stuck on both sides.
    pub no_value: u64,
    pub inapplicable: u64,
    pub failures: Vec<(u64, String)>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Interpreter equivalence on generated programs, one per seed.
pub fn interpreter_suite(seeds: impl IntoIterator<Item = u64>, profile: Profile, fuel: u64) -> SuiteReport {
    let mut r = SuiteReport::default();
    for seed in seeds {
        let t = gen_term(seed, SUITE_TERM_SIZE, profile);
        r.programs += 1;
        r.checked += 1;
        match diff_theorem2(&t, fuel) {
            Diff2::Agree { outcome: Ok(_), .. } => r.agreed += 1,
            Diff2::Agree { .. } => {
                r.agreed += 1;
                r.no_value += 1;
            }
            Diff2::Disagree(d) => r.failures.push((seed, d)),
        }
    }
    r
}

/// Lifting correctness on generated programs: every parameter of every
/// function with inner functions is lifted in turn.
pub fn lifting_suite(seeds: impl IntoIterator<Item = u64>, profile: Profile, fuel: u64) -> SuiteReport {
    let mut r = SuiteReport::default();
    for seed in seeds {
        let t = gen_term(seed, SUITE_TERM_SIZE, profile);
        r.programs += 1;
        for (g, x, hset, _) in liftable_targets(&t) {
            r.checked += 1;
            match diff_theorem1(&t, &x, &g, &hset, fuel) {
                Diff1::Agree(Ok(_)) => r.agreed += 1,
                Diff1::Agree(Err(_)) | Diff1::Diverges => {
                    r.agreed += 1;
                    r.no_value += 1;
                }
                Diff1::Inapplicable => r.inapplicable += 1,
                Diff1::Disagree(d) => r.failures.push((seed, format!("lifting {x} of {g}\n{d}"))),
            }
        }
    }
    r
}
