//! The compiler driver: boxing, splitting, lambda-lifting and cps
//! conversion in that order, with the structural checks between passes.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::boxing::{assert_no_extrusion, box_program, BoxingError, BoxingReport};
use crate::cps::{cps_convert, verify_early_evaluation_safety, CpsError, CpsProgram, EarlyEvalSite};
use crate::frontend::{dump_program, parse, print, ParseError};
use crate::lang::{check_cps_callgraph, CallGraphViolation, Name, Program, Ty};
use crate::lifting::{lambda_lift, LiftError, LiftOptions, LiftingReport};
use crate::splitting::{check_cps_convertible, split_program, OffendingSite, SplitError, SplitReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ast,
    Boxed,
    Split,
    Lifted,
    Cps,
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "ast" => Stage::Ast,
            "boxed" => Stage::Boxed,
            "split" => Stage::Split,
            "lifted" => Stage::Lifted,
            "cps" => Stage::Cps,
            _ => return Err(format!("unknown stage {s}; expected ast, boxed, split, lifted or cps")),
        })
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Ast => "ast",
            Stage::Boxed => "boxed",
            Stage::Split => "split",
            Stage::Lifted => "lifted",
            Stage::Cps => "cps",
        })
    }
}

fn list<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("\n")
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum CompileError {
    #[error("parse error at {}: {}", .0.span, .0.message)]
    Parse(ParseError),
    #[error("{}", list(.0))]
    CallGraph(Vec<CallGraphViolation>),
    #[error(transparent)]
    Boxing(#[from] BoxingError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Lift(#[from] LiftError),
    #[error("extruded variables remain after {stage}: {}", vars.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", "))]
    Extrusion { stage: Stage, vars: BTreeSet<Name> },
    #[error("not cps-convertible after {stage}:\n{}", list(sites))]
    NotConvertible { stage: Stage, sites: Vec<OffendingSite> },
    #[error(transparent)]
    Cps(#[from] CpsError),
    #[error("unsafe early evaluation:\n{}", list(.0))]
    EarlyEvaluation(Vec<EarlyEvalSite>),
}

impl From<ParseError> for CompileError {
    fn from(e: ParseError) -> Self {
        CompileError::Parse(e)
    }
}

/// Every intermediate form up to the requested stage.
#[derive(Clone, Debug)]
pub struct Compiled {
    pub ast: Program,
    pub boxed: Option<(Program, BoxingReport)>,
    pub split: Option<(Program, SplitReport)>,
    pub lifted: Option<(Program, LiftingReport)>,
    pub cps: Option<CpsProgram>,
}

impl Compiled {
    /// Canonical text of one stage, if it was reached.
    pub fn emit(&self, stage: Stage) -> Option<String> {
        Some(match stage {
            Stage::Ast => dump_program(&self.ast),
            Stage::Boxed => print(&self.boxed.as_ref()?.0),
            Stage::Split => print(&self.split.as_ref()?.0),
            Stage::Lifted => print(&self.lifted.as_ref()?.0),
            Stage::Cps => self.cps.as_ref()?.dump(),
        })
    }

    pub fn stats(&self) -> CompileStats {
        let mut s = CompileStats::default();
        if let Some((b, r)) = &self.boxed {
            s.locals = r.total_locals();
            s.boxed = r.boxed_count();
            s.boxing_pointers = boxing_pointers(&self.ast, b);
        }
        if let Some((_, r)) = &self.split {
            s.split_functions = r.generated_count();
        }
        if let Some((_, r)) = &self.lifted {
            s.cps_locals = r.total_locals;
            s.lifted = r.lifted_vars;
            s.added_params = r.added_params();
            let lifted: BTreeSet<&Name> = r.added.values().flatten().collect();
            s.lifted_boxed = lifted.iter().filter(|x| s.boxing_pointers.contains(**x)).count();
        }
        if let Some(c) = &self.cps {
            s.cps_functions = c.funs.len();
        }
        s
    }
}

/// Pointer variables introduced by boxing.
fn boxing_pointers(before: &Program, after: &Program) -> BTreeSet<Name> {
    let mut out = BTreeSet::new();
    for (f, g) in before.funs.iter().zip(&after.funs) {
        let old = f.bound_names();
        for l in &g.locals {
            if matches!(l.ty, Ty::Ptr(_)) && !old.contains(&l.name) {
                out.insert(l.name.clone());
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CompileStats {
    /// Parameters and locals before boxing.
    pub locals: usize,
    pub boxed: usize,
    pub boxing_pointers: BTreeSet<Name>,
    pub split_functions: usize,
    /// Parameters and locals of cps functions before lifting.
    pub cps_locals: usize,
    pub lifted: usize,
    pub lifted_boxed: usize,
    pub added_params: usize,
    pub cps_functions: usize,
}

/// Parse `src` and run the passes up to `until`.
pub fn compile(src: &str, until: Stage) -> Result<Compiled, CompileError> {
    compile_program(parse(src)?, until, LiftOptions::default())
}

pub fn compile_program(ast: Program, until: Stage, lift: LiftOptions) -> Result<Compiled, CompileError> {
    let cg = check_cps_callgraph(&ast);
    if !cg.is_empty() {
        return Err(CompileError::CallGraph(cg));
    }
    let mut c = Compiled {
        ast,
        boxed: None,
        split: None,
        lifted: None,
        cps: None,
    };
    if until == Stage::Ast {
        return Ok(c);
    }
    let boxed = box_program(&c.ast)?;
    no_extrusion(&boxed.0, Stage::Boxed)?;
    c.boxed = Some(boxed);
    if until == Stage::Boxed {
        return Ok(c);
    }
    let split = split_program(&c.boxed.as_ref().expect("boxed").0)?;
    no_extrusion(&split.0, Stage::Split)?;
    convertible(&split.0, Stage::Split)?;
    c.split = Some(split);
    if until == Stage::Split {
        return Ok(c);
    }
    let lifted = lambda_lift(&c.split.as_ref().expect("split").0, lift)?;
    no_extrusion(&lifted.0, Stage::Lifted)?;
    convertible(&lifted.0, Stage::Lifted)?;
    c.lifted = Some(lifted);
    if until == Stage::Lifted {
        return Ok(c);
    }
    let ir = cps_convert(&c.lifted.as_ref().expect("lifted").0)?;
    let unsafe_sites = verify_early_evaluation_safety(&ir);
    if !unsafe_sites.is_empty() {
        return Err(CompileError::EarlyEvaluation(unsafe_sites));
    }
    c.cps = Some(ir);
    Ok(c)
}

fn no_extrusion(p: &Program, stage: Stage) -> Result<(), CompileError> {
    assert_no_extrusion(p).map_err(|vars| CompileError::Extrusion { stage, vars })
}

fn convertible(p: &Program, stage: Stage) -> Result<(), CompileError> {
    let v = check_cps_convertible(p);
    if v.convertible {
        Ok(())
    } else {
        Err(CompileError::NotConvertible {
            stage,
            sites: v.offending,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_parse_and_order() {
        for s in ["ast", "boxed", "split", "lifted", "cps"] {
            assert_eq!(s.parse::<Stage>().unwrap().to_string(), s);
        }
        assert!("c".parse::<Stage>().is_err());
        assert!(Stage::Ast < Stage::Cps);
    }

    #[test]
    fn stops_at_the_requested_stage() {
        let src = "cps int f(int n) { yield(); return n; }";
        let c = compile(src, Stage::Split).unwrap();
        assert!(c.split.is_some() && c.lifted.is_none());
        assert!(c.emit(Stage::Cps).is_none());
        assert!(compile(src, Stage::Cps).unwrap().emit(Stage::Cps).is_some());
    }

    #[test]
    fn native_calling_cps_is_rejected() {
        let e = compile("cps int g() { return 1; } int f() { return g(); } cps int main() { return 0; }", Stage::Cps);
        assert!(matches!(e, Err(CompileError::CallGraph(_))));
    }

    #[test]
    fn boxed_and_lifted_counts() {
        let src = "cps int f(int n) { int a = 0; int *p = &a; yield(); *p = n; return a; }";
        let s = compile(src, Stage::Cps).unwrap().stats();
        assert_eq!(s.boxed, 1);
        assert_eq!(s.boxing_pointers.len(), 1);
        assert!(s.lifted_boxed <= s.lifted);
    }
}
