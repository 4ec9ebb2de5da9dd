//! Heap-allocation of extruded variables.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::lang::*;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FunBoxing {
    pub boxed: BTreeSet<Name>,
    pub total_locals: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BoxingReport {
    pub funs: BTreeMap<Name, FunBoxing>,
}

impl BoxingReport {
    pub fn boxed_count(&self) -> usize {
        self.funs.values().map(|f| f.boxed.len()).sum()
    }

    pub fn total_locals(&self) -> usize {
        self.funs.values().map(|f| f.total_locals).sum()
    }

    fn merge(&mut self, other: BoxingReport) {
        self.funs.extend(other.funs);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum BoxingError {
    #[error("{span}: `&{name}` in `{fun}` does not name a local variable or parameter")]
    Unsupported { fun: Name, name: Name, span: Span },
}

/// Box the extruded variables of a single function, inner functions included.
pub fn box_extruded(f: &FunDecl) -> Result<(FunDecl, BoxingReport), BoxingError> {
    let mut taken = BTreeSet::new();
    taken.insert(f.name.clone());
    taken.extend(f.bound_names());
    for h in f.inner() {
        taken.insert(h.name.clone());
        taken.extend(h.bound_names());
    }
    f.body.walk(&mut |t| {
        if let TermKind::Var(x) | TermKind::Call(x, _) = &t.kind {
            taken.insert(x.clone());
        }
    });
    let mut names = NameSupply::new(taken);
    box_fun(f, &mut names)
}

/// Box every function of a program.
pub fn box_program(p: &Program) -> Result<(Program, BoxingReport), BoxingError> {
    let mut names = NameSupply::for_program(p);
    let mut report = BoxingReport::default();
    let mut funs = Vec::with_capacity(p.funs.len());
    for f in &p.funs {
        let (g, r) = box_fun(f, &mut names)?;
        report.merge(r);
        funs.push(g);
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

/// `Ok` iff no function of `p` has an extruded variable.
pub fn assert_no_extrusion(p: &Program) -> Result<(), BTreeSet<Name>> {
    let mut all = BTreeSet::new();
    for f in &p.funs {
        all.extend(extruded_variables(f, false));
    }
    if all.is_empty() {
        Ok(())
    } else {
        Err(all)
    }
}

fn box_fun(f: &FunDecl, names: &mut NameSupply) -> Result<(FunDecl, BoxingReport), BoxingError> {
    let bound = f.bound_names();
    let mut in_scope = bound.clone();
    for h in f.inner() {
        in_scope.extend(h.bound_names());
    }
    let mut mine = BTreeSet::new();
    let mut bad = None;
    f.body.walk(&mut |t| {
        if let TermKind::AddrOf(x) = &t.kind {
            if bound.contains(x) {
                mine.insert(x.clone());
            } else if !in_scope.contains(x) && bad.is_none() {
                bad = Some((x.clone(), t.span));
            }
        }
    });
    if let Some((x, span)) = bad {
        return Err(BoxingError::Unsupported {
            fun: f.name.clone(),
            name: x,
            span,
        });
    }

    let mut g = f.clone();
    let mut report = BoxingReport::default();

    // Inner functions box their own variables first; their bodies then see
    // ours rewritten below like any other free use.
    let mut inner_err = None;
    rewrite_letrecs(&mut g.body, &mut |d| {
        if inner_err.is_some() {
            return;
        }
        match box_fun(d, names) {
            Ok((d2, r)) => {
                *d = d2;
                report.merge(r);
            }
            Err(e) => inner_err = Some(e),
        }
    });
    if let Some(e) = inner_err {
        return Err(e);
    }

    report.funs.insert(
        f.name.clone(),
        FunBoxing {
            boxed: mine.clone(),
            total_locals: f.params.len() + f.locals.len(),
        },
    );
    if mine.is_empty() {
        return Ok((g, report));
    }

    let mut cells: BTreeMap<Name, Name> = BTreeMap::new();
    let mut ptr_locals = Vec::new();
    // Cells in declaration order: parameters, then locals.
    let order: Vec<&Param> = f.params.iter().chain(f.locals.iter()).collect();
    for p in &order {
        if !mine.contains(&p.name) {
            continue;
        }
        let preferred = name(&format!("p{}", p.name));
        let px = if !names.is_taken(&preferred) {
            names.reserve(&preferred);
            preferred
        } else {
            names.fresh(&format!("p{}", p.name))
        };
        cells.insert(p.name.clone(), px.clone());
        ptr_locals.push(Param::new(px, Ty::Ptr(Box::new(p.ty.clone()))));
    }

    let needs_tmp = body_needs_tmp(&g.body);
    let tmp = if needs_tmp {
        Some(names.fresh(&format!("{}_ret", f.name)))
    } else {
        None
    };

    rewrite_uses(&mut g.body, &cells);
    let frees: Vec<Term> = ptr_locals
        .iter()
        .map(|p| Term::native(Builtin::Free, vec![Term::var_n(p.name.clone())]))
        .collect();
    rewrite_returns(&mut g.body, &frees, tmp.as_ref());
    let body = std::mem::replace(&mut g.body, Term::unit());
    let body = close_tail(body, &frees, tmp.as_ref());

    let mut prologue = Vec::new();
    for p in &ptr_locals {
        prologue.push(Term::assign_n(
            p.name.clone(),
            Term::native(Builtin::Alloc, vec![]),
        ));
    }
    for p in &f.params {
        if let Some(px) = cells.get(&p.name) {
            prologue.push(Term::new(TermKind::SetRef(
                Box::new(Term::var_n(px.clone())),
                Box::new(Term::var_n(p.name.clone())),
            )));
        }
    }
    prologue.push(body);
    g.body = Term::block(prologue);

    g.locals.retain(|l| !mine.contains(&l.name));
    g.locals.extend(ptr_locals);
    if let Some(t) = tmp {
        g.locals.push(Param::new(t, f.ret.clone()));
    }
    Ok((g, report))
}

/// Apply `f` to every inner function declared directly in this body (not to
/// functions nested inside those).
fn rewrite_letrecs(t: &mut Term, f: &mut dyn FnMut(&mut FunDecl)) {
    if let TermKind::LetRec(ds, rest) = &mut t.kind {
        for d in ds.iter_mut() {
            f(d);
        }
        rewrite_letrecs(rest, f);
        return;
    }
    for c in t.children_mut() {
        rewrite_letrecs(c, f);
    }
}

fn rewrite_uses(t: &mut Term, cells: &BTreeMap<Name, Name>) {
    let cell = |x: &Name| cells.get(x).map(|px| Term::var_n(px.clone()));
    match &mut t.kind {
        TermKind::Var(x) => {
            if let Some(px) = cell(x) {
                t.kind = TermKind::Deref(Box::new(px));
            }
        }
        TermKind::AddrOf(x) => {
            if let Some(px) = cell(x) {
                t.kind = px.kind;
            }
        }
        TermKind::Assign(x, e) => {
            rewrite_uses(e, cells);
            if let Some(px) = cell(x) {
                let e = std::mem::replace(&mut **e, Term::unit());
                t.kind = TermKind::SetRef(Box::new(px), Box::new(e));
            }
        }
        _ => {
            for c in t.children_mut() {
                rewrite_uses(c, cells);
            }
        }
    }
}

fn body_needs_tmp(t: &Term) -> bool {
    let mut found = false;
    visit_own(t, &mut |s| {
        if let TermKind::Return(e) = &s.kind {
            if !matches!(e.kind, TermKind::Const(_)) {
                found = true;
            }
        }
    });
    found || tail_value_needs_tmp(t)
}

fn tail_value_needs_tmp(t: &Term) -> bool {
    match &t.kind {
        TermKind::Seq(_, b) => tail_value_needs_tmp(b),
        TermKind::If(_, a, b) => tail_value_needs_tmp(a) || tail_value_needs_tmp(b),
        TermKind::LetRec(_, r) | TermKind::Labelled(_, r) => tail_value_needs_tmp(r),
        _ => !yields_nothing(t),
    }
}

/// Visit the terms of this function, skipping inner function bodies.
fn visit_own(t: &Term, f: &mut dyn FnMut(&Term)) {
    f(t);
    if let TermKind::LetRec(_, rest) = &t.kind {
        visit_own(rest, f);
        return;
    }
    for c in t.children() {
        visit_own(c, f);
    }
}

fn frees_then(frees: &[Term], last: Term) -> Term {
    let mut v = frees.to_vec();
    v.push(last);
    Term::block(v)
}

fn rewrite_returns(t: &mut Term, frees: &[Term], tmp: Option<&Name>) {
    match &mut t.kind {
        TermKind::Return(e) => {
            let e = std::mem::replace(&mut **e, Term::unit());
            let span = t.span;
            *t = if matches!(e.kind, TermKind::Const(_)) {
                frees_then(frees, Term::ret(e))
            } else {
                let tmp = tmp.expect("temporary allocated for non-constant returns");
                let mut v = vec![Term::assign_n(tmp.clone(), e)];
                v.extend(frees.iter().cloned());
                v.push(Term::ret(Term::var_n(tmp.clone())));
                Term::block(v)
            }
            .with_span(span);
        }
        TermKind::LetRec(_, rest) => rewrite_returns(rest, frees, tmp),
        _ => {
            for c in t.children_mut() {
                rewrite_returns(c, frees, tmp);
            }
        }
    }
}

/// Terms whose value is always unit and which therefore need no temporary
/// when the cells are freed after them.
fn yields_nothing(t: &Term) -> bool {
    matches!(
        t.kind,
        TermKind::Const(Value::Unit)
            | TermKind::Assign(..)
            | TermKind::While(..)
            | TermKind::Break
            | TermKind::Goto(_)
            | TermKind::SetRef(..)
            | TermKind::Return(_)
            | TermKind::NativeCall(Builtin::Print(_), _)
            | TermKind::NativeCall(Builtin::Free, _)
            | TermKind::NativeCall(Builtin::Spawn(_), _)
    ) || is_freed_return(t)
}

fn is_freed_return(t: &Term) -> bool {
    matches!(t.seq_items().last().map(|l| &l.kind), Some(TermKind::Return(_)))
}

/// Free the cells on fall-through at the end of the body.
fn close_tail(t: Term, frees: &[Term], tmp: Option<&Name>) -> Term {
    let span = t.span;
    let kind = match t.kind {
        TermKind::Seq(a, b) => TermKind::Seq(a, Box::new(close_tail(*b, frees, tmp))),
        TermKind::If(c, a, b) => TermKind::If(
            c,
            Box::new(close_tail(*a, frees, tmp)),
            Box::new(close_tail(*b, frees, tmp)),
        ),
        TermKind::LetRec(ds, r) => TermKind::LetRec(ds, Box::new(close_tail(*r, frees, tmp))),
        TermKind::Labelled(l, r) => TermKind::Labelled(l, Box::new(close_tail(*r, frees, tmp))),
        TermKind::Return(_) | TermKind::Goto(_) => return Term { kind: t.kind, span },
        _ => {
            let t = Term { kind: t.kind, span };
            if is_freed_return(&t) {
                return t;
            }
            if yields_nothing(&t) {
                let mut v = vec![t];
                v.extend(frees.iter().cloned());
                return Term::block(v);
            }
            let tmp = tmp.expect("temporary allocated for valued tails");
            let mut v = vec![Term::assign_n(tmp.clone(), t)];
            v.extend(frees.iter().cloned());
            v.push(Term::var_n(tmp.clone()));
            return Term::block(v);
        }
    };
    Term { kind, span }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse;

    const EXAMPLE: &str = "cps void f(int x) { int y = 0; int *p1 = &x, *p2 = &y; print(*p1 + *p2); return; }";

    #[test]
    fn extruded_before_and_after() {
        let p = parse(EXAMPLE).unwrap();
        let expect: BTreeSet<Name> = [name("x"), name("y")].into_iter().collect();
        assert_eq!(assert_no_extrusion(&p), Err(expect));
        let (q, report) = box_program(&p).unwrap();
        assert_eq!(assert_no_extrusion(&q), Ok(()));
        assert_eq!(report.boxed_count(), 2);
    }

    #[test]
    fn boxed_shape_matches_listing() {
        let p = parse(EXAMPLE).unwrap();
        let (q, _) = box_program(&p).unwrap();
        let expect = parse(
            "cps void f(int x) {
                int *p1; int *p2; int *px; int *py;
                px = alloc(); py = alloc();
                *px = x;
                *py = 0;
                p1 = px; p2 = py;
                print(*p1 + *p2);
                free(px); free(py);
                return;
            }",
        )
        .unwrap();
        assert_eq!(q.normalize(), expect.normalize());
    }

    #[test]
    fn no_address_of_is_identity() {
        let p = parse("cps int f(int a) { int b = a + 1; return b; }").unwrap();
        let (q, r) = box_program(&p).unwrap();
        assert_eq!(p, q);
        assert_eq!(r.boxed_count(), 0);
    }

    #[test]
    fn idempotent() {
        let p = parse(EXAMPLE).unwrap();
        let (q, _) = box_program(&p).unwrap();
        let (r, rep) = box_program(&q).unwrap();
        assert_eq!(q, r);
        assert_eq!(rep.boxed_count(), 0);
    }

    #[test]
    fn valued_return_frees_after_evaluation() {
        let p = parse("cps int f(int x) { int *p = &x; *p = 4; return x + 1; }").unwrap();
        let (q, _) = box_program(&p).unwrap();
        let f = q.fun("f").unwrap();
        let items = f.body.seq_items();
        let n = items.len();
        assert!(matches!(items[n - 1].kind, TermKind::Return(_)));
        assert!(matches!(
            items[n - 2].kind,
            TermKind::NativeCall(Builtin::Free, _)
        ));
        assert!(matches!(items[n - 3].kind, TermKind::Assign(..)));
    }

    #[test]
    fn global_address_is_rejected() {
        let p = parse("int g; cps int f() { int *p = &g; return 0; }").unwrap();
        assert!(matches!(box_program(&p), Err(BoxingError::Unsupported { .. })));
    }
}
