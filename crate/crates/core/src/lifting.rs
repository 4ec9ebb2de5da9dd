//! Lambda-lifting of inner functions: liftability analysis, incremental
//! parameter lifting and block floating.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::lang::*;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum LiftError {
    #[error("{witness}: parameter `{param}` of `{fun}` is not liftable: inner function `{callee}` is called in non-tail position")]
    NotLiftable {
        fun: Name,
        param: Name,
        callee: Name,
        witness: Span,
    },
    #[error("inner function `{fun}` is not closed: {}", leaked.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(", "))]
    InnerNotClosed { fun: Name, leaked: Vec<Name> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamVerdict {
    pub fun: Name,
    pub param: Name,
    pub liftable: bool,
    /// Span of a non-tail call to an inner function when not liftable.
    pub witness: Option<(Name, Span)>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LiftabilityReport {
    pub verdicts: Vec<ParamVerdict>,
}

impl LiftabilityReport {
    pub fn all_liftable(&self) -> bool {
        self.verdicts.iter().all(|v| v.liftable)
    }

    pub fn verdict(&self, fun: &str, param: &str) -> Option<&ParamVerdict> {
        self.verdicts
            .iter()
            .find(|v| &*v.fun == fun && &*v.param == param)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LiftingReport {
    /// Distinct variables that became a parameter of at least one inner
    /// function.
    pub lifted_vars: usize,
    /// Parameters and locals of cps functions before lifting.
    pub total_locals: usize,
    /// Parameters added to each inner function, in order.
    pub added: BTreeMap<Name, Vec<Name>>,
    /// Variables used by a single inner function and moved into it.
    pub localised: BTreeMap<Name, Vec<Name>>,
}

impl LiftingReport {
    pub fn added_params(&self) -> usize {
        self.added.values().map(Vec::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LiftOptions {
    /// Move variables used by exactly one inner function into it instead of
    /// lifting them.
    pub localise_single_use: bool,
    /// Lift even when the tail-call condition fails.
    pub force: bool,
}

impl Default for LiftOptions {
    fn default() -> Self {
        LiftOptions {
            localise_single_use: true,
            force: false,
        }
    }
}

fn walk_paths<'a>(t: &'a Term, path: &mut Vec<usize>, f: &mut dyn FnMut(&'a Term, &[usize])) {
    f(t, path);
    for (i, c) in t.children().into_iter().enumerate() {
        path.push(i);
        walk_paths(c, path, f);
        path.pop();
    }
}

/// Calls to `h` inside `g` (bodies of inner functions included), split into
/// tail and non-tail sites.
pub fn tail_call_sites(g: &FunDecl, h: &str) -> (Vec<Span>, Vec<Span>) {
    let tails = tail_positions(g);
    let mut tail = Vec::new();
    let mut non_tail = Vec::new();
    walk_paths(&g.body, &mut Vec::new(), &mut |t, p| {
        if let TermKind::Call(f, _) = &t.kind {
            if &**f == h {
                if tails.contains(p) {
                    tail.push(t.span);
                } else {
                    non_tail.push(t.span);
                }
            }
        }
    });
    (tail, non_tail)
}

/// First non-tail call to an inner function of `g`, if any.
fn non_tail_inner_call(g: &FunDecl) -> Option<(Name, Span)> {
    let inner: BTreeSet<Name> = g.inner().into_iter().map(|h| h.name.clone()).collect();
    if inner.is_empty() {
        return None;
    }
    let tails = tail_positions(g);
    let mut found = None;
    walk_paths(&g.body, &mut Vec::new(), &mut |t, p| {
        if let TermKind::Call(f, _) = &t.kind {
            if inner.contains(f) && !tails.contains(p) && found.is_none() {
                found = Some((f.clone(), t.span));
            }
        }
    });
    found
}

fn all_funs(p: &Program) -> Vec<&FunDecl> {
    let mut v = Vec::new();
    for f in &p.funs {
        v.push(f);
        v.extend(f.inner());
    }
    v
}

/// Per-parameter liftability verdicts for every function, inner ones
/// included.
pub fn check_liftable(p: &Program) -> LiftabilityReport {
    let mut verdicts = Vec::new();
    for g in all_funs(p) {
        let witness = non_tail_inner_call(g);
        for x in g.param_names() {
            verdicts.push(ParamVerdict {
                fun: g.name.clone(),
                param: x.clone(),
                liftable: witness.is_none(),
                witness: witness.clone(),
            });
        }
    }
    LiftabilityReport { verdicts }
}

// -- parameter lifting ----------------------------------------------------

/// Variables read or written in `t`, excluding bodies of nested functions.
fn own_uses(t: &Term, out: &mut BTreeSet<Name>) {
    match &t.kind {
        TermKind::Var(x) | TermKind::AddrOf(x) => {
            out.insert(x.clone());
        }
        TermKind::Assign(x, e) => {
            out.insert(x.clone());
            own_uses(e, out);
        }
        TermKind::LetRec(_, r) => own_uses(r, out),
        _ => {
            for c in t.children() {
                own_uses(c, out);
            }
        }
    }
}

fn own_calls(t: &Term, out: &mut Vec<Name>) {
    match &t.kind {
        TermKind::Call(f, args) => {
            if !out.contains(f) {
                out.push(f.clone());
            }
            for a in args {
                own_calls(a, out);
            }
        }
        TermKind::LetRec(_, r) => own_calls(r, out),
        _ => {
            for c in t.children() {
                own_calls(c, out);
            }
        }
    }
}

/// Ordered set insertion.
fn push_new(v: &mut Vec<Name>, x: &Name) -> bool {
    if v.contains(x) {
        false
    } else {
        v.push(x.clone());
        true
    }
}

struct InnerInfo {
    bound: BTreeSet<Name>,
    uses: Vec<Name>,
    calls: Vec<Name>,
}

/// Inner functions of `f` with the function that defines each one.
fn inner_tree(f: &FunDecl) -> Vec<(Name, &FunDecl)> {
    fn go<'a>(parent: &Name, t: &'a Term, out: &mut Vec<(Name, &'a FunDecl)>) {
        if let TermKind::LetRec(ds, r) = &t.kind {
            for d in ds {
                out.push((parent.clone(), d));
                go(&d.name, &d.body, out);
            }
            go(parent, r, out);
            return;
        }
        for c in t.children() {
            go(parent, c, out);
        }
    }
    let mut out = Vec::new();
    go(&f.name, &f.body, &mut out);
    out
}

/// Apply `f` to the inner function named `n`; false if there is none.
fn with_decl(t: &mut Term, n: &Name, f: &mut dyn FnMut(&mut FunDecl)) -> bool {
    if let TermKind::LetRec(ds, r) = &mut t.kind {
        for d in ds.iter_mut() {
            if &d.name == n {
                f(d);
                return true;
            }
            if with_decl(&mut d.body, n, f) {
                return true;
            }
        }
        return with_decl(r, n, f);
    }
    t.children_mut().into_iter().any(|c| with_decl(c, n, f))
}

fn append_args(t: &mut Term, extra: &BTreeMap<Name, Vec<Name>>) {
    if let TermKind::Call(f, args) = &mut t.kind {
        if let Some(xs) = extra.get(f) {
            for x in xs {
                args.push(Term::var_n(x.clone()));
            }
        }
    }
    for c in t.children_mut() {
        append_args(c, extra);
    }
}

fn lift_fun(
    f: &FunDecl,
    globals: &BTreeSet<Name>,
    opts: LiftOptions,
    report: &mut LiftingReport,
) -> Result<FunDecl, LiftError> {
    let mut f = f.clone();
    if f.inner().is_empty() {
        return Ok(f);
    }

    if opts.localise_single_use {
        localise(&mut f, report);
    }

    // Types of every binder in f.
    let mut types: BTreeMap<Name, Ty> = BTreeMap::new();
    for p in f.params.iter().chain(f.locals.iter()) {
        types.insert(p.name.clone(), p.ty.clone());
    }
    let tree = inner_tree(&f);
    let mut info: Vec<(Name, InnerInfo)> = Vec::new();
    let mut binder_of: BTreeMap<Name, Name> = BTreeMap::new();
    for p in f.params.iter().chain(f.locals.iter()) {
        binder_of.insert(p.name.clone(), f.name.clone());
    }
    for (_, d) in &tree {
        for p in d.params.iter().chain(d.locals.iter()) {
            types.insert(p.name.clone(), p.ty.clone());
            binder_of.insert(p.name.clone(), d.name.clone());
        }
        let mut u = BTreeSet::new();
        own_uses(&d.body, &mut u);
        let mut calls = Vec::new();
        own_calls(&d.body, &mut calls);
        info.push((
            d.name.clone(),
            InnerInfo {
                bound: d.bound_names(),
                uses: u.into_iter().collect(),
                calls,
            },
        ));
    }

    // Fixed point over needs, in discovery order.
    let mut needs: BTreeMap<Name, Vec<Name>> = BTreeMap::new();
    for (n, i) in &info {
        let v: Vec<Name> = i
            .uses
            .iter()
            .filter(|x| !i.bound.contains(*x) && !globals.contains(*x) && binder_of.contains_key(*x))
            .cloned()
            .collect();
        needs.insert(n.clone(), v);
    }
    loop {
        let mut changed = false;
        for (n, i) in &info {
            let mut mine = needs[n].clone();
            for c in &i.calls {
                if let Some(theirs) = needs.get(c) {
                    for x in theirs.clone() {
                        if !i.bound.contains(&x) && push_new(&mut mine, &x) {
                            changed = true;
                        }
                    }
                }
            }
            needs.insert(n.clone(), mine);
        }
        if !changed {
            break;
        }
    }

    // Liftability of every variable that is about to be lifted.
    if !opts.force {
        let binders: BTreeSet<&Name> = needs
            .values()
            .flatten()
            .filter_map(|x| binder_of.get(x))
            .collect();
        for b in binders {
            let g: &FunDecl = if *b == f.name {
                &f
            } else {
                tree.iter().find(|(_, d)| &d.name == b).map(|(_, d)| *d).unwrap()
            };
            if let Some((callee, witness)) = non_tail_inner_call(g) {
                let param = needs
                    .values()
                    .flatten()
                    .find(|x| binder_of.get(*x) == Some(b))
                    .unwrap()
                    .clone();
                return Err(LiftError::NotLiftable {
                    fun: b.clone(),
                    param,
                    callee,
                    witness,
                });
            }
        }
    }

    let extra: BTreeMap<Name, Vec<Name>> = needs
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let mut lifted = BTreeSet::new();
    for (h, xs) in &extra {
        with_decl(&mut f.body, h, &mut |d| {
            for x in xs {
                d.params.push(Param::new(x.clone(), types[x].clone()));
                lifted.insert(x.clone());
            }
        });
        report.added.insert(h.clone(), xs.clone());
    }
    append_args(&mut f.body, &extra);
    report.lifted_vars += lifted.len();
    Ok(f)
}

/// Variables of `f` used by exactly one inner function and nowhere else
/// become locals of that function.
fn localise(f: &mut FunDecl, report: &mut LiftingReport) {
    let mut f_uses = BTreeSet::new();
    own_uses(&f.body, &mut f_uses);
    let tree = inner_tree(f);
    let mut users: BTreeMap<Name, Vec<Name>> = BTreeMap::new();
    for (_, d) in &tree {
        let mut u = BTreeSet::new();
        own_uses(&d.body, &mut u);
        for x in u {
            users.entry(x).or_default().push(d.name.clone());
        }
    }
    let mut moves: Vec<(Name, Param)> = Vec::new();
    for l in &f.locals {
        if f_uses.contains(&l.name) {
            continue;
        }
        if let Some(us) = users.get(&l.name) {
            if us.len() == 1 {
                moves.push((us[0].clone(), l.clone()));
            }
        }
    }
    for (h, p) in moves {
        f.locals.retain(|l| l.name != p.name);
        report.localised.entry(h.clone()).or_default().push(p.name.clone());
        let mut p = Some(p);
        with_decl(&mut f.body, &h, &mut |d| d.locals.extend(p.take()));
    }
}

/// Incremental parameter lifting of every function of `p`.
pub fn lift_parameters(p: &Program) -> Result<(Program, LiftingReport), LiftError> {
    lift_parameters_with(p, LiftOptions::default())
}

pub fn lift_parameters_with(p: &Program, opts: LiftOptions) -> Result<(Program, LiftingReport), LiftError> {
    let globals = p.global_names();
    let mut report = LiftingReport::default();
    for f in &p.funs {
        if f.is_cps() {
            report.total_locals += f.params.len() + f.locals.len();
            for h in f.inner() {
                report.total_locals += h.params.len() + h.locals.len();
            }
        }
    }
    let mut funs = Vec::with_capacity(p.funs.len());
    for f in &p.funs {
        funs.push(lift_fun(f, &globals, opts, &mut report)?);
    }
    Ok((
        Program {
            globals: p.globals.clone(),
            funs,
            entry: p.entry.clone(),
        },
        report,
    ))
}

// -- block floating -------------------------------------------------------

fn strip_letrecs(t: &mut Term, out: &mut Vec<FunDecl>) {
    if let TermKind::LetRec(..) = &t.kind {
        let taken = std::mem::replace(t, Term::unit());
        let span = taken.span;
        let TermKind::LetRec(ds, r) = taken.kind else { unreachable!() };
        for mut d in ds {
            let mut nested = Vec::new();
            strip_letrecs(&mut d.body, &mut nested);
            out.push(d);
            out.extend(nested);
        }
        *t = (*r).with_span(span);
        strip_letrecs(t, out);
        return;
    }
    for c in t.children_mut() {
        strip_letrecs(c, out);
    }
}

/// Move every inner function to the top level, right after the function
/// that contained it.
pub fn float_blocks(p: &Program) -> Result<Program, LiftError> {
    let globals = p.global_names();
    for f in &p.funs {
        for h in f.inner() {
            let leaked: Vec<Name> = fun_free_variables(h)
                .into_iter()
                .filter(|x| !globals.contains(x))
                .collect();
            if !leaked.is_empty() {
                return Err(LiftError::InnerNotClosed {
                    fun: h.name.clone(),
                    leaked,
                });
            }
        }
    }
    let mut funs = Vec::new();
    for f in &p.funs {
        let mut f = f.clone();
        let mut floated = Vec::new();
        strip_letrecs(&mut f.body, &mut floated);
        f.body = std::mem::replace(&mut f.body, Term::unit()).normalize();
        funs.push(f);
        for mut d in floated {
            d.body = std::mem::replace(&mut d.body, Term::unit()).normalize();
            funs.push(d);
        }
    }
    Ok(Program {
        globals: p.globals.clone(),
        funs,
        entry: p.entry.clone(),
    })
}

/// Parameter lifting followed by block floating.
pub fn lambda_lift(p: &Program, opts: LiftOptions) -> Result<(Program, LiftingReport), LiftError> {
    let (q, report) = lift_parameters_with(p, opts)?;
    Ok((float_blocks(&q)?, report))
}

// -- alpha-renamed view ---------------------------------------------------

/// Rename each variable that is bound in several functions to `x1`, `x2`, ...
/// in the order its binders appear; unique names stay as they are.
pub fn alpha_view(p: &Program) -> Program {
    let mut count: BTreeMap<Name, usize> = BTreeMap::new();
    let funs = all_funs(p);
    for f in &funs {
        for x in f.bound_names() {
            *count.entry(x).or_default() += 1;
        }
    }
    let mut next: BTreeMap<Name, usize> = BTreeMap::new();
    let mut out = p.clone();
    for f in &mut out.funs {
        rename_fun(f, &count, &mut next);
    }
    out
}

fn rename_fun(f: &mut FunDecl, count: &BTreeMap<Name, usize>, next: &mut BTreeMap<Name, usize>) {
    let mut map = BTreeMap::new();
    for p in f.params.iter_mut().chain(f.locals.iter_mut()) {
        if count.get(&p.name).copied().unwrap_or(0) > 1 {
            let k = next.entry(p.name.clone()).or_default();
            *k += 1;
            let n = name(&format!("{}{}", p.name, k));
            map.insert(p.name.clone(), n.clone());
            p.name = n;
        }
    }
    rename_body(&mut f.body, &map, count, next);
}

fn rename_body(
    t: &mut Term,
    map: &BTreeMap<Name, Name>,
    count: &BTreeMap<Name, usize>,
    next: &mut BTreeMap<Name, usize>,
) {
    match &mut t.kind {
        TermKind::Var(x) | TermKind::AddrOf(x) => {
            if let Some(n) = map.get(x) {
                *x = n.clone();
            }
        }
        TermKind::Assign(x, e) => {
            if let Some(n) = map.get(x) {
                *x = n.clone();
            }
            rename_body(e, map, count, next);
        }
        TermKind::LetRec(ds, r) => {
            for d in ds.iter_mut() {
                // An inner function sees the outer renaming for its free
                // variables and its own for its binders.
                let mut inner = map.clone();
                for p in d.params.iter_mut().chain(d.locals.iter_mut()) {
                    if count.get(&p.name).copied().unwrap_or(0) > 1 {
                        let k = next.entry(p.name.clone()).or_default();
                        *k += 1;
                        let n = name(&format!("{}{}", p.name, k));
                        inner.insert(p.name.clone(), n.clone());
                        p.name = n;
                    } else {
                        inner.remove(&p.name);
                    }
                }
                rename_body(&mut d.body, &inner, count, next);
            }
            rename_body(r, map, count, next);
        }
        _ => {
            for c in t.children_mut() {
                rename_body(c, map, count, next);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{parse, print};

    const RUNNING: &str = "
        cps int f(int rc) {
            if (rc < 0) {
                yield();
                return l();
                cps int l() { rc = 0; return done(); }
            }
            cps int done() { print(\"rc = \", rc); return rc; }
            return done();
        }";

    const COUNTER: &str = "
        cps int f(int rc) {
            cps void set() { rc = 0; return; }
            cps void done() { print(\"rc = \", rc); return; }
            set();
            return done();
        }";

    #[test]
    fn running_example_is_liftable() {
        let p = parse(RUNNING).unwrap();
        let r = check_liftable(&p);
        assert!(r.verdict("f", "rc").unwrap().liftable);
    }

    #[test]
    fn counterexample_is_not_liftable() {
        let p = parse(COUNTER).unwrap();
        let r = check_liftable(&p);
        let v = r.verdict("f", "rc").unwrap();
        assert!(!v.liftable);
        let (callee, span) = v.witness.clone().unwrap();
        assert_eq!(&*callee, "set");
        assert_eq!(span.line, 5);
        assert!(matches!(lift_parameters(&p), Err(LiftError::NotLiftable { .. })));
    }

    #[test]
    fn no_inner_functions_all_liftable() {
        let p = parse("cps int f(int a, int b) { return a + b; }").unwrap();
        let r = check_liftable(&p);
        assert_eq!(r.verdicts.len(), 2);
        assert!(r.all_liftable());
    }

    #[test]
    fn tail_sites_of_set() {
        let p = parse(COUNTER).unwrap();
        let f = p.fun("f").unwrap();
        let (tail, non_tail) = tail_call_sites(f, "set");
        assert!(tail.is_empty());
        assert_eq!(non_tail.len(), 1);
        let (tail, non_tail) = tail_call_sites(f, "done");
        assert_eq!((tail.len(), non_tail.len()), (1, 0));
        assert_eq!(tail_call_sites(f, "nothing"), (vec![], vec![]));
    }

    #[test]
    fn lifts_running_example() {
        let p = parse(RUNNING).unwrap();
        let (q, report) = lift_parameters(&p).unwrap();
        let expect = parse(
            "cps int f(int rc) {
                if (rc < 0) {
                    yield();
                    return l(rc);
                    cps int l(int rc) { rc = 0; return done(rc); }
                }
                cps int done(int rc) { print(\"rc = \", rc); return rc; }
                return done(rc);
            }",
        )
        .unwrap();
        assert_eq!(print(&q), print(&expect));
        assert_eq!(report.lifted_vars, 1);
        assert_eq!(report.added_params(), 2);

        let view = alpha_view(&q);
        let text = print(&view);
        assert!(text.contains("cps int f(int rc1)"), "{text}");
        assert!(text.contains("cps int l(int rc2)"), "{text}");
        assert!(text.contains("cps int done(int rc3)"), "{text}");

        let floated = float_blocks(&q).unwrap();
        let names: Vec<&str> = floated.funs.iter().map(|f| &*f.name).collect();
        assert_eq!(names, ["f", "l", "done"]);
        assert!(floated
            .funs
            .iter()
            .all(|f| !f.body.contains(&|t| matches!(t.kind, TermKind::LetRec(..)))));
    }

    #[test]
    fn lifting_is_idempotent() {
        let p = parse(RUNNING).unwrap();
        let (q, _) = lift_parameters(&p).unwrap();
        let (r, report) = lift_parameters(&q).unwrap();
        assert_eq!(q, r);
        assert_eq!(report.added_params(), 0);
    }

    #[test]
    fn closed_program_is_identity() {
        let p = parse("cps int f(int a) { cps int g(int b) { return b; } return g(a); }").unwrap();
        let (q, _) = lift_parameters(&p).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn floating_rejects_open_functions() {
        let p = parse(RUNNING).unwrap();
        assert!(matches!(float_blocks(&p), Err(LiftError::InnerNotClosed { .. })));
    }

    #[test]
    fn single_use_variable_is_localised() {
        let src = "
            cps int f(int a) {
                int t;
                cps int g() { t = a + 1; return t; }
                return g();
            }";
        let p = parse(src).unwrap();
        let (q, report) = lift_parameters(&p).unwrap();
        assert_eq!(report.localised.get("g").map(Vec::len), Some(1));
        assert_eq!(report.added.get("g").cloned(), Some(vec![name("a")]));
        let (_, report) = lift_parameters_with(
            &p,
            LiftOptions {
                localise_single_use: false,
                force: false,
            },
        )
        .unwrap();
        assert_eq!(report.added.get("g").map(Vec::len), Some(2));
        let _ = q;
    }
}
