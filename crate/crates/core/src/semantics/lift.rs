//! Parameter lifting of a single variable on core terms, and the matching
//! liftability condition.

use std::collections::BTreeSet;

use crate::lang::{tail_positions, FunDecl, Name, Param, Term, TermKind, TermPath};

/// First declaration of `g` in `t`.
fn find_decl<'a>(t: &'a Term, g: &str) -> Option<&'a FunDecl> {
    let mut found = None;
    t.walk(&mut |u| {
        if found.is_some() {
            return;
        }
        if let TermKind::LetRec(ds, _) = &u.kind {
            found = ds.iter().find(|d| &*d.name == g);
        }
    });
    found
}

/// Names of every function defined, at any depth, inside `g`.
pub fn inner_functions(t: &Term, g: &str) -> BTreeSet<Name> {
    find_decl(t, g)
        .map(|d| d.inner().into_iter().map(|h| h.name.clone()).collect())
        .unwrap_or_default()
}

/// The lifted form of `t` with respect to `x`: every function in `hset`
/// gains `x` as a trailing parameter and every call to one of them passes
/// `x` along.
pub fn lift_core(t: &Term, x: &str, hset: &BTreeSet<Name>) -> Term {
    use TermKind::*;
    let kind = match &t.kind {
        LetRec(ds, rest) => {
            let ds = ds
                .iter()
                .map(|d| {
                    let mut d2 = d.clone();
                    d2.body = lift_core(&d.body, x, hset);
                    if hset.contains(&d.name) {
                        d2.params.push(Param::int(x));
                    }
                    d2
                })
                .collect();
            LetRec(ds, Box::new(lift_core(rest, x, hset)))
        }
        Call(f, args) => {
            let mut args: Vec<Term> = args.iter().map(|a| lift_core(a, x, hset)).collect();
            if hset.contains(f) {
                args.push(Term::var(x));
            }
            Call(f.clone(), args)
        }
        _ => {
            let mut t2 = t.clone();
            for (c, orig) in t2.children_mut().into_iter().zip(t.children()) {
                *c = lift_core(orig, x, hset);
            }
            return t2;
        }
    };
    Term::at(kind, t.span)
}

fn call_paths(t: &Term, hset: &BTreeSet<Name>, path: &mut TermPath, out: &mut Vec<TermPath>) {
    if let TermKind::Call(f, _) = &t.kind {
        if hset.contains(f) {
            out.push(path.clone());
        }
    }
    for (i, c) in t.children().into_iter().enumerate() {
        path.push(i);
        call_paths(c, hset, path, out);
        path.pop();
    }
}

/// `x` is a parameter of `g` and every call to a function of `hset` inside
/// `g` is in tail position of the function containing it.
pub fn check_liftable_core(t: &Term, x: &str, g: &str, hset: &BTreeSet<Name>) -> bool {
    let Some(d) = find_decl(t, g) else {
        return false;
    };
    if !d.param_names().any(|p| &**p == x) {
        return false;
    }
    let tails = tail_positions(d);
    let mut sites = Vec::new();
    call_paths(&d.body, hset, &mut Vec::new(), &mut sites);
    sites.iter().all(|p| tails.contains(p))
}

/// Every `(g, x, hset)` triple where `g` has inner functions, with the
/// liftability verdict.
pub fn liftable_targets(t: &Term) -> Vec<(Name, Name, BTreeSet<Name>, bool)> {
    let mut out = Vec::new();
    let mut decls = Vec::new();
    t.walk(&mut |u| {
        if let TermKind::LetRec(ds, _) = &u.kind {
            decls.extend(ds.iter());
        }
    });
    for d in decls {
        let hset: BTreeSet<Name> = d.inner().into_iter().map(|h| h.name.clone()).collect();
        if hset.is_empty() {
            continue;
        }
        for x in d.param_names() {
            let ok = check_liftable_core(t, x, &d.name, &hset);
            out.push((d.name.clone(), x.clone(), hset.clone(), ok));
        }
    }
    out
}
