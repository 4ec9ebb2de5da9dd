//! Splitting: explicit control flow after cps calls, then goto elimination
//! into mutually recursive inner cps functions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::lang::*;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SplitError {
    #[error("{span}: goto `{label}` in `{fun}` does not target a label of an enclosing block")]
    BadGoto { fun: Name, label: Name, span: Span },
    #[error("{span}: goto in native function `{fun}` is not supported")]
    NativeGoto { fun: Name, span: Span },
    #[error("{span}: cps call inside a compound expression in `{fun}`")]
    NestedCpsCall { fun: Name, span: Span },
    #[error("{span}: label `{label}` defined twice in `{fun}`")]
    DuplicateLabel { fun: Name, label: Name, span: Span },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitReport {
    /// Inner functions created from labels, per top-level function.
    pub generated: BTreeMap<Name, Vec<Name>>,
}

impl SplitReport {
    pub fn generated_count(&self) -> usize {
        self.generated.values().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OffendingSite {
    pub fun: Name,
    pub span: Span,
    pub reason: String,
}

impl fmt::Display for OffendingSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: in `{}`: {}", self.span, self.fun, self.reason)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConvertibilityVerdict {
    pub convertible: bool,
    pub offending: Vec<OffendingSite>,
}

/// Names callable as cps functions anywhere in `p`: top-level and inner cps
/// functions plus the primitives.
pub fn cps_callables(p: &Program) -> BTreeSet<Name> {
    let mut s = p.cps_names();
    for f in &p.funs {
        for h in f.inner() {
            if h.is_cps() {
                s.insert(h.name.clone());
            }
        }
    }
    s
}

fn is_cps_call(t: &Term, cps: &BTreeSet<Name>) -> bool {
    matches!(&t.kind, TermKind::Call(f, _) if cps.contains(f))
}

/// True if `t` contains a cps call outside inner function bodies.
fn has_cps_call(t: &Term, cps: &BTreeSet<Name>) -> bool {
    if is_cps_call(t, cps) {
        return true;
    }
    match &t.kind {
        TermKind::LetRec(_, rest) => has_cps_call(rest, cps),
        _ => t.children().into_iter().any(|c| has_cps_call(c, cps)),
    }
}

fn own_any(t: &Term, pred: &dyn Fn(&Term) -> bool) -> bool {
    if pred(t) {
        return true;
    }
    match &t.kind {
        TermKind::LetRec(_, rest) => own_any(rest, pred),
        _ => t.children().into_iter().any(|c| own_any(c, pred)),
    }
}

fn ends_explicitly(items: &[Term]) -> bool {
    match items.last().map(|t| &t.kind) {
        Some(TermKind::Return(_) | TermKind::Goto(_) | TermKind::Labelled(..)) => true,
        Some(TermKind::If(_, a, b)) => {
            ends_explicitly(&a.seq_items().into_iter().cloned().collect::<Vec<_>>())
                && ends_explicitly(&b.seq_items().into_iter().cloned().collect::<Vec<_>>())
        }
        Some(TermKind::LetRec(_, r)) => {
            ends_explicitly(&r.seq_items().into_iter().cloned().collect::<Vec<_>>())
        }
        Some(TermKind::Seq(..)) => {
            let t = items.last().unwrap();
            ends_explicitly(&t.seq_items().into_iter().cloned().collect::<Vec<_>>())
        }
        _ => false,
    }
}

fn items_of(t: Term) -> Vec<Term> {
    if t.is_unit() {
        return vec![];
    }
    t.flatten_seq()
        .into_iter()
        .flat_map(|i| match i.kind {
            TermKind::Seq(..) => items_of(i),
            _ => vec![i],
        })
        .collect()
}

#[derive(Clone, Debug)]
enum Succ {
    FunctionEnd,
    Label(Name),
}

struct Splitter<'a> {
    fun: Name,
    cps: &'a BTreeSet<Name>,
    globals: &'a BTreeSet<Name>,
    names: &'a mut NameSupply,
    new_locals: Vec<Param>,
    labels: BTreeMap<Name, Name>,
}

impl Splitter<'_> {
    fn fresh_label(&mut self) -> Name {
        self.names.fresh(&self.fun)
    }

    fn temp(&mut self) -> Name {
        let t = self.names.fresh(&self.fun);
        self.new_locals.push(Param::new(t.clone(), Ty::Int));
        t
    }

    // -- hoisting of cps calls out of expressions -------------------------

    fn hoist_args(&mut self, args: Vec<Term>, pre: &mut Vec<Term>) -> Result<Vec<Term>, SplitError> {
        let last = args.iter().rposition(|a| has_cps_call(a, self.cps));
        let mut out = Vec::with_capacity(args.len());
        for (i, a) in args.into_iter().enumerate() {
            let a = self.hoist_expr(a, pre)?;
            let spill = matches!(last, Some(l) if i < l)
                && !matches!(a.kind, TermKind::Const(_));
            if spill {
                let t = self.temp();
                pre.push(Term::assign_n(t.clone(), a));
                out.push(Term::var_n(t));
            } else {
                out.push(a);
            }
        }
        Ok(out)
    }

    fn hoist_expr(&mut self, e: Term, pre: &mut Vec<Term>) -> Result<Term, SplitError> {
        if !has_cps_call(&e, self.cps) {
            return Ok(e);
        }
        let span = e.span;
        match e.kind {
            TermKind::Call(f, args) if self.cps.contains(&f) => {
                let args = self.hoist_args(args, pre)?;
                let t = self.temp();
                pre.push(Term::at(
                    TermKind::Assign(t.clone(), Box::new(Term::at(TermKind::Call(f, args), span))),
                    span,
                ));
                Ok(Term::var_n(t))
            }
            TermKind::Call(f, args) => {
                let args = self.hoist_args(args, pre)?;
                Ok(Term::at(TermKind::Call(f, args), span))
            }
            TermKind::NativeCall(b, args) => {
                let args = self.hoist_args(args, pre)?;
                Ok(Term::at(TermKind::NativeCall(b, args), span))
            }
            TermKind::Deref(a) => {
                let a = self.hoist_expr(*a, pre)?;
                Ok(Term::at(TermKind::Deref(Box::new(a)), span))
            }
            _ => Err(SplitError::NestedCpsCall {
                fun: self.fun.clone(),
                span,
            }),
        }
    }

    /// Rewrite one statement so that cps calls appear only as `f(..);`,
    /// `x = f(..);` with `x` a local, or `return f(..);`.
    fn hoist_stmt(&mut self, t: Term) -> Result<Vec<Term>, SplitError> {
        if !has_cps_call(&t, self.cps) {
            return Ok(vec![t]);
        }
        let span = t.span;
        let mut pre = Vec::new();
        let stmt = match t.kind {
            TermKind::Call(f, args) => {
                let args = self.hoist_args(args, &mut pre)?;
                Term::at(TermKind::Call(f, args), span)
            }
            TermKind::Assign(x, e) => {
                let e = *e;
                if is_cps_call(&e, self.cps) {
                    let esp = e.span;
                    let TermKind::Call(f, args) = e.kind else { unreachable!() };
                    let args = self.hoist_args(args, &mut pre)?;
                    let call = Term::at(TermKind::Call(f, args), esp);
                    if self.globals.contains(&x) {
                        let t = self.temp();
                        pre.push(Term::assign_n(t.clone(), call));
                        Term::at(TermKind::Assign(x, Box::new(Term::var_n(t))), span)
                    } else {
                        Term::at(TermKind::Assign(x, Box::new(call)), span)
                    }
                } else {
                    let e = self.hoist_expr(e, &mut pre)?;
                    Term::at(TermKind::Assign(x, Box::new(e)), span)
                }
            }
            TermKind::Return(e) => {
                let e = *e;
                if is_cps_call(&e, self.cps) {
                    let esp = e.span;
                    let TermKind::Call(f, args) = e.kind else { unreachable!() };
                    let args = self.hoist_args(args, &mut pre)?;
                    Term::at(TermKind::Return(Box::new(Term::at(TermKind::Call(f, args), esp))), span)
                } else {
                    let e = self.hoist_expr(e, &mut pre)?;
                    Term::at(TermKind::Return(Box::new(e)), span)
                }
            }
            TermKind::If(c, a, b) => {
                let c = self.hoist_expr(*c, &mut pre)?;
                Term::at(TermKind::If(Box::new(c), a, b), span)
            }
            TermKind::SetRef(a, b) => {
                let mut v = self.hoist_args(vec![*a, *b], &mut pre)?;
                let b = v.pop().unwrap();
                let a = v.pop().unwrap();
                Term::at(TermKind::SetRef(Box::new(a), Box::new(b)), span)
            }
            k @ (TermKind::NativeCall(..) | TermKind::Deref(_) | TermKind::Var(_)) => {
                self.hoist_expr(Term::at(k, span), &mut pre)?
            }
            // Loops, labels, letrecs and nested blocks are handled by the
            // list walker.
            k => Term::at(k, span),
        };
        pre.push(stmt);
        Ok(pre)
    }

    // -- explicit flow ----------------------------------------------------

    fn if_needs_split(&self, t: &Term) -> bool {
        let cps = self.cps;
        own_any(t, &|s| match &s.kind {
            TermKind::Labelled(..) => true,
            TermKind::While(..) => self.while_needs_desugar(s),
            TermKind::Return(e) if is_cps_call(e, cps) => false,
            TermKind::Call(f, _) => cps.contains(f) && !self.is_tail_return_operand(t, s),
            _ => false,
        })
    }

    /// Whether `s` (a cps call somewhere in `root`) is the direct operand of a
    /// `return`.
    fn is_tail_return_operand(&self, root: &Term, s: &Term) -> bool {
        let mut found = false;
        root.walk(&mut |t| {
            if let TermKind::Return(e) = &t.kind {
                if std::ptr::eq(&**e, s) {
                    found = true;
                }
            }
        });
        found
    }

    fn while_needs_desugar(&self, t: &Term) -> bool {
        let cps = self.cps;
        own_any(t, &|s| {
            is_cps_call(s, cps) || matches!(s.kind, TermKind::Goto(_) | TermKind::Labelled(..))
        })
    }

    fn follower_ok(&self, next: &Term) -> bool {
        match &next.kind {
            TermKind::Goto(_) => true,
            TermKind::Return(e) => match &e.kind {
                TermKind::Call(g, args) if self.cps.contains(g) => args.iter().all(|a| {
                    matches!(&a.kind, TermKind::Var(y) if !self.globals.contains(y))
                }),
                _ => false,
            },
            _ => false,
        }
    }

    fn is_call_stmt(&self, t: &Term) -> bool {
        match &t.kind {
            TermKind::Assign(_, e) => is_cps_call(e, self.cps),
            TermKind::Call(..) => is_cps_call(t, self.cps),
            _ => false,
        }
    }

    fn rename_label(&mut self, l: &Name) -> Name {
        self.labels.get(l).cloned().unwrap_or_else(|| l.clone())
    }

    fn list(&mut self, items: Vec<Term>, succ: &Succ, explicit: bool) -> Result<Vec<Term>, SplitError> {
        let mut flat = Vec::new();
        for it in items {
            flat.extend(self.hoist_stmt(it)?);
        }
        let mut out = self.list_inner(flat, succ, explicit)?;
        if explicit {
            if let Succ::Label(m) = succ {
                if !ends_explicitly(&out) {
                    out.push(Term::goto(m));
                }
            }
        }
        Ok(out)
    }

    fn list_inner(&mut self, items: Vec<Term>, succ: &Succ, explicit: bool) -> Result<Vec<Term>, SplitError> {
        let mut out = Vec::new();
        let mut it = items.into_iter().peekable();
        while let Some(t) = it.next() {
            let span = t.span;
            if self.is_call_stmt(&t) {
                let call = t;
                match it.peek() {
                    None => match (succ, &call.kind) {
                        (Succ::FunctionEnd, TermKind::Call(..)) => {
                            out.push(Term::at(TermKind::Return(Box::new(call)), span));
                        }
                        (Succ::Label(m), _) => {
                            out.push(call);
                            out.push(Term::goto(m));
                        }
                        (Succ::FunctionEnd, _) => {
                            let l = self.fresh_label();
                            out.push(call);
                            out.push(Term::goto(&l));
                            out.push(Term::labelled(&l, Term::unit()));
                        }
                    },
                    Some(next) if self.follower_ok(next) => out.push(call),
                    Some(_) => {
                        let l = self.fresh_label();
                        out.push(call);
                        out.push(Term::goto(&l));
                        self.blocks(l, Vec::new(), it.collect(), succ, &mut out)?;
                        return Ok(out);
                    }
                }
                continue;
            }
            match t.kind {
                TermKind::Labelled(l, body) => {
                    let l = self.rename_label(&l);
                    let at = out.len();
                    self.blocks(l, items_of(*body), it.collect(), succ, &mut out)?;
                    out[at].span = span;
                    return Ok(out);
                }
                TermKind::Goto(l) => {
                    let l = self.rename_label(&l);
                    out.push(Term::at(TermKind::Goto(l), span));
                }
                TermKind::While(c, b) => {
                    let w = Term::at(TermKind::While(c, b), span);
                    if !self.while_needs_desugar(&w) {
                        out.push(w);
                        continue;
                    }
                    let TermKind::While(c, b) = w.kind else { unreachable!() };
                    let wl = self.fresh_label();
                    let bl = self.fresh_label();
                    let mut body = *b;
                    replace_breaks(&mut body, &bl);
                    let mut then = items_of(body);
                    then.push(Term::goto(&wl));
                    let cond = Term::at(
                        TermKind::If(c, Box::new(Term::block(then)), Box::new(Term::unit())),
                        span,
                    );
                    let wl_content = self.list(vec![cond], &Succ::Label(bl.clone()), true)?;
                    out.push(Term::labelled(&wl, Term::block(wl_content)).with_span(span));
                    self.blocks(bl, Vec::new(), it.collect(), succ, &mut out)?;
                    return Ok(out);
                }
                TermKind::If(c, a, b) => {
                    let t = Term::at(TermKind::If(c, a, b), span);
                    if !self.if_needs_split(&t) {
                        let TermKind::If(c, a, b) = t.kind else { unreachable!() };
                        let a = Term::block(self.map_gotos(items_of(*a))?);
                        let b = Term::block(self.map_gotos(items_of(*b))?);
                        out.push(Term::at(TermKind::If(c, Box::new(a), Box::new(b)), span));
                        continue;
                    }
                    let TermKind::If(c, a, b) = t.kind else { unreachable!() };
                    if it.peek().is_none() {
                        let a = self.list(items_of(*a), succ, explicit)?;
                        let b = self.list(items_of(*b), succ, explicit)?;
                        out.push(Term::at(
                            TermKind::If(c, Box::new(Term::block(a)), Box::new(Term::block(b))),
                            span,
                        ));
                        return Ok(out);
                    }
                    let r = self.fresh_label();
                    let rs = Succ::Label(r.clone());
                    let a = self.list(items_of(*a), &rs, false)?;
                    let b = self.list(items_of(*b), &rs, false)?;
                    out.push(Term::at(
                        TermKind::If(c, Box::new(Term::block(a)), Box::new(Term::block(b))),
                        span,
                    ));
                    self.blocks(r, Vec::new(), it.collect(), succ, &mut out)?;
                    return Ok(out);
                }
                TermKind::LetRec(ds, r) => {
                    let mut ds2 = Vec::with_capacity(ds.len());
                    for d in ds {
                        ds2.push(self.inner_fun(d)?);
                    }
                    let mut rest = items_of(*r);
                    rest.extend(it);
                    let inner = self.list(rest, succ, explicit)?;
                    out.push(Term::at(TermKind::LetRec(ds2, Box::new(Term::block(inner))), span));
                    return Ok(out);
                }
                k => {
                    let mut t = Term::at(k, span);
                    self.rename_gotos_in(&mut t);
                    out.push(t);
                }
            }
        }
        Ok(out)
    }

    /// Labelled block `l` holding `head` and the statements of `rest` up to
    /// the next label. Later labels stay siblings of `l`, which falls
    /// through to the first of them.
    fn blocks(
        &mut self,
        l: Name,
        head: Vec<Term>,
        mut rest: Vec<Term>,
        succ: &Succ,
        out: &mut Vec<Term>,
    ) -> Result<(), SplitError> {
        let tail = match rest.iter().position(|t| matches!(t.kind, TermKind::Labelled(..))) {
            Some(k) => rest.split_off(k),
            None => Vec::new(),
        };
        let next = match tail.first().map(|t| &t.kind) {
            Some(TermKind::Labelled(m, _)) => Succ::Label(self.rename_label(m)),
            _ => succ.clone(),
        };
        let mut content = head;
        content.extend(rest);
        let inner = self.list(content, &next, true)?;
        out.push(Term::labelled(&l, Term::block(inner)));
        if !tail.is_empty() {
            out.extend(self.list_inner(tail, succ, true)?);
        }
        Ok(())
    }

    fn map_gotos(&mut self, items: Vec<Term>) -> Result<Vec<Term>, SplitError> {
        Ok(items
            .into_iter()
            .map(|mut t| {
                self.rename_gotos_in(&mut t);
                t
            })
            .collect())
    }

    fn rename_gotos_in(&mut self, t: &mut Term) {
        if let TermKind::Goto(l) = &mut t.kind {
            if let Some(n) = self.labels.get(l) {
                *l = n.clone();
            }
            return;
        }
        if let TermKind::LetRec(_, r) = &mut t.kind {
            self.rename_gotos_in(r);
            return;
        }
        for c in t.children_mut() {
            self.rename_gotos_in(c);
        }
    }

    fn inner_fun(&mut self, d: FunDecl) -> Result<FunDecl, SplitError> {
        if !d.is_cps() {
            check_native_gotos(&d)?;
            return Ok(d);
        }
        let mut sub = Splitter {
            fun: self.fun.clone(),
            cps: self.cps,
            globals: self.globals,
            names: self.names,
            new_locals: Vec::new(),
            labels: BTreeMap::new(),
        };
        let mut d = d;
        sub.labels = label_renames(&d, sub.names);
        let body = std::mem::replace(&mut d.body, Term::unit());
        let items = sub.list(items_of(body), &Succ::FunctionEnd, false)?;
        d.body = Term::block(items);
        d.locals.extend(sub.new_locals);
        Ok(d)
    }
}

fn replace_breaks(t: &mut Term, bl: &Name) {
    match &mut t.kind {
        TermKind::Break => t.kind = TermKind::Goto(bl.clone()),
        TermKind::While(..) => {}
        TermKind::LetRec(_, r) => replace_breaks(r, bl),
        _ => {
            for c in t.children_mut() {
                replace_breaks(c, bl);
            }
        }
    }
}

fn check_native_gotos(d: &FunDecl) -> Result<(), SplitError> {
    let mut bad = None;
    d.body.walk(&mut |t| {
        if matches!(t.kind, TermKind::Goto(_) | TermKind::Labelled(..)) && bad.is_none() {
            bad = Some(t.span);
        }
    });
    match bad {
        Some(span) => Err(SplitError::NativeGoto {
            fun: d.name.clone(),
            span,
        }),
        None => Ok(()),
    }
}

/// User labels keep their name unless it clashes with another name of the
/// program, in which case they get a fresh one.
fn label_renames(d: &FunDecl, names: &mut NameSupply) -> BTreeMap<Name, Name> {
    let mut labels = Vec::new();
    own_walk(&d.body, &mut |t| {
        if let TermKind::Labelled(l, _) = &t.kind {
            labels.push(l.clone());
        }
    });
    let mut map = BTreeMap::new();
    for l in labels {
        if names.is_taken(&l) {
            let fresh = names.fresh(&d.name);
            map.insert(l, fresh);
        } else {
            names.reserve(&l);
        }
    }
    map
}

fn own_walk(t: &Term, f: &mut dyn FnMut(&Term)) {
    f(t);
    if let TermKind::LetRec(_, r) = &t.kind {
        own_walk(r, f);
        return;
    }
    for c in t.children() {
        own_walk(c, f);
    }
}

fn program_names(p: &Program) -> BTreeSet<Name> {
    let mut taken = p.global_names();
    for f in &p.funs {
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
    }
    for prim in Primitive::ALL {
        taken.insert(name(prim.name()));
    }
    taken
}

/// Insert gotos after non-tail cps calls, desugar loops that contain cps
/// calls or gotos, and give every labelled block an explicit exit.
pub fn make_flow_explicit(p: &Program) -> Result<Program, SplitError> {
    let mut names = NameSupply::new(program_names(p));
    make_flow_explicit_with(p, &mut names)
}

fn make_flow_explicit_with(p: &Program, names: &mut NameSupply) -> Result<Program, SplitError> {
    let cps = cps_callables(p);
    let globals = p.global_names();
    let mut out = p.clone();
    for f in &mut out.funs {
        if !f.is_cps() {
            check_native_gotos(f)?;
            continue;
        }
        let mut s = Splitter {
            fun: f.name.clone(),
            cps: &cps,
            globals: &globals,
            names,
            new_locals: Vec::new(),
            labels: BTreeMap::new(),
        };
        s.labels = label_renames(f, s.names);
        let body = std::mem::replace(&mut f.body, Term::unit());
        let items = s.list(items_of(body), &Succ::FunctionEnd, false)?;
        f.body = Term::block(items);
        f.locals.extend(s.new_locals);
    }
    Ok(out)
}

// -- goto elimination -----------------------------------------------------

struct Eliminator {
    fun: Name,
    ret: Ty,
    generated: Vec<Name>,
}

impl Eliminator {
    fn list(&mut self, items: Vec<Term>, scope: &[BTreeSet<Name>]) -> Result<Term, SplitError> {
        let first_label = items
            .iter()
            .position(|t| matches!(t.kind, TermKind::Labelled(..)));
        let Some(k) = first_label else {
            let v = items
                .into_iter()
                .map(|t| self.stmt(t, scope))
                .collect::<Result<Vec<_>, _>>()?;
            return Ok(Term::block(v));
        };
        let mut items = items;
        let blocks: Vec<Term> = items.split_off(k);
        let mut labels = Vec::new();
        let mut bodies = Vec::new();
        let mut seen = BTreeSet::new();
        for b in blocks {
            let span = b.span;
            match b.kind {
                TermKind::Labelled(l, body) => {
                    if !seen.insert(l.clone()) {
                        return Err(SplitError::DuplicateLabel {
                            fun: self.fun.clone(),
                            label: l,
                            span,
                        });
                    }
                    labels.push((l, span));
                    bodies.push(*body);
                }
                other => {
                    // A statement after a labelled block belongs to it.
                    let last = bodies.last_mut().expect("label precedes");
                    let prev = std::mem::replace(last, Term::unit());
                    *last = Term::seq(prev, Term::at(other, span));
                }
            }
        }
        let mut inner_scope = scope.to_vec();
        inner_scope.push(seen);
        let mut decls = Vec::new();
        for ((l, span), body) in labels.iter().cloned().zip(bodies) {
            let body = self.list(items_of(body), &inner_scope)?;
            self.generated.push(l.clone());
            decls.push(FunDecl {
                name: l,
                kind: FunKind::Cps,
                ret: self.ret.clone(),
                params: vec![],
                locals: vec![],
                body,
                span,
            });
        }
        let mut prefix = items
            .into_iter()
            .map(|t| self.stmt(t, &inner_scope))
            .collect::<Result<Vec<_>, _>>()?;
        if !ends_explicitly(&prefix) {
            prefix.push(Term::ret(Term::call_n(labels[0].0.clone(), vec![])));
        }
        Ok(Term::letrec(decls, Term::block(prefix)))
    }

    fn stmt(&mut self, t: Term, scope: &[BTreeSet<Name>]) -> Result<Term, SplitError> {
        let span = t.span;
        let kind = match t.kind {
            TermKind::Goto(l) => {
                if !scope.iter().any(|s| s.contains(&l)) {
                    return Err(SplitError::BadGoto {
                        fun: self.fun.clone(),
                        label: l,
                        span,
                    });
                }
                TermKind::Return(Box::new(Term::at(TermKind::Call(l, vec![]), span)))
            }
            TermKind::If(c, a, b) => TermKind::If(
                c,
                Box::new(self.list(items_of(*a), scope)?),
                Box::new(self.list(items_of(*b), scope)?),
            ),
            TermKind::LetRec(ds, r) => {
                let mut ds2 = Vec::new();
                for d in ds {
                    ds2.push(if d.is_cps() {
                        let mut e = Eliminator {
                            fun: self.fun.clone(),
                            ret: d.ret.clone(),
                            generated: Vec::new(),
                        };
                        let mut d = d;
                        let body = std::mem::replace(&mut d.body, Term::unit());
                        d.body = e.list(items_of(body), &[])?;
                        self.generated.extend(e.generated);
                        d
                    } else {
                        d
                    });
                }
                TermKind::LetRec(ds2, Box::new(self.list(items_of(*r), scope)?))
            }
            TermKind::Seq(..) => return self.list(items_of(Term::at(t.kind, span)), scope),
            k => {
                let t = Term::at(k, span);
                let mut bad = None;
                own_walk(&t, &mut |s| {
                    if let TermKind::Goto(l) | TermKind::Labelled(l, _) = &s.kind {
                        bad.get_or_insert((l.clone(), s.span));
                    }
                });
                if let Some((label, span)) = bad {
                    return Err(SplitError::BadGoto {
                        fun: self.fun.clone(),
                        label,
                        span,
                    });
                }
                return Ok(t);
            }
        };
        Ok(Term::at(kind, span))
    }
}

/// Turn every labelled block into an inner cps function and every goto into
/// a tail call to it.
pub fn eliminate_gotos(p: &Program) -> Result<(Program, SplitReport), SplitError> {
    let mut out = p.clone();
    let mut report = SplitReport::default();
    for f in &mut out.funs {
        if !f.is_cps() {
            check_native_gotos(f)?;
            continue;
        }
        let mut e = Eliminator {
            fun: f.name.clone(),
            ret: f.ret.clone(),
            generated: Vec::new(),
        };
        let body = std::mem::replace(&mut f.body, Term::unit());
        f.body = e.list(items_of(body), &[])?;
        report.generated.insert(f.name.clone(), e.generated);
    }
    Ok((out, report))
}

/// Both splitting steps.
pub fn split_program(p: &Program) -> Result<(Program, SplitReport), SplitError> {
    let mut names = NameSupply::new(program_names(p));
    let explicit = make_flow_explicit_with(p, &mut names)?;
    eliminate_gotos(&explicit)
}

// -- convertibility check -------------------------------------------------

struct Checker<'a> {
    fun: Name,
    cps: &'a BTreeSet<Name>,
    shared: BTreeSet<Name>,
    out: Vec<OffendingSite>,
}

impl Checker<'_> {
    fn flag(&mut self, span: Span, reason: &str) {
        self.out.push(OffendingSite {
            fun: self.fun.clone(),
            span,
            reason: reason.to_string(),
        });
    }

    fn call_args_clean(&self, t: &Term) -> bool {
        match &t.kind {
            TermKind::Call(_, args) => args.iter().all(|a| !has_cps_call(a, self.cps)),
            _ => false,
        }
    }

    fn non_shared_vars(&self, args: &[Term]) -> bool {
        args.iter()
            .all(|a| matches!(&a.kind, TermKind::Var(y) if !self.shared.contains(y)))
    }

    fn list(&mut self, t: &Term, tail: bool) {
        let items = t.seq_items();
        let n = items.len();
        let mut i = 0;
        while i < n {
            let it = items[i];
            let last = i + 1 == n;
            let next = items.get(i + 1).copied();
            match &it.kind {
                TermKind::Return(e) if is_cps_call(e, self.cps) => {
                    if !self.call_args_clean(e) {
                        self.flag(e.span, "cps call in the arguments of a cps call");
                    }
                }
                TermKind::Call(..) | TermKind::Assign(..) if self.stmt_call(it).is_some() => {
                    let call = self.stmt_call(it).unwrap();
                    if !self.call_args_clean(call) {
                        self.flag(call.span, "cps call in the arguments of a cps call");
                    }
                    if let TermKind::Assign(x, _) = &it.kind {
                        if self.shared.contains(x) {
                            self.flag(it.span, "result of a cps call assigned to a shared variable");
                        }
                    }
                    match next.map(|n| &n.kind) {
                        None => {
                            if !(tail && matches!(it.kind, TermKind::Call(..))) {
                                self.flag(it.span, "cps call not followed by a tail call");
                            }
                        }
                        Some(TermKind::Return(e)) if e.is_unit() => {}
                        Some(TermKind::Return(e)) if is_cps_call(e, self.cps) => {
                            if let TermKind::Call(_, args) = &e.kind {
                                if !self.non_shared_vars(args) {
                                    self.flag(
                                        next.unwrap().span,
                                        "continuation arguments must be non-shared variables",
                                    );
                                }
                            }
                        }
                        Some(TermKind::Call(g, args))
                            if self.cps.contains(g)
                                && matches!(
                                    items.get(i + 2).map(|t| &t.kind),
                                    Some(TermKind::Return(e)) if e.is_unit()
                                ) =>
                        {
                            if !self.non_shared_vars(args) {
                                self.flag(
                                    next.unwrap().span,
                                    "continuation arguments must be non-shared variables",
                                );
                            }
                            i += 2;
                            continue;
                        }
                        Some(_) => self.flag(
                            next.unwrap().span,
                            "statement interleaved between a cps call and its continuation",
                        ),
                    }
                }
                TermKind::If(c, a, b) => {
                    if has_cps_call(c, self.cps) {
                        self.flag(c.span, "cps call in a condition");
                    }
                    self.list(a, tail && last);
                    self.list(b, tail && last);
                }
                TermKind::LetRec(ds, r) => {
                    for d in ds {
                        if d.is_cps() {
                            let mut sub = Checker {
                                fun: d.name.clone(),
                                cps: self.cps,
                                shared: self.shared.clone(),
                                out: Vec::new(),
                            };
                            sub.list(&d.body, true);
                            self.out.extend(sub.out);
                        }
                    }
                    self.list(r, tail && last);
                }
                TermKind::Labelled(_, b) => self.list(b, tail && last),
                _ => {
                    if own_any(it, &|s| is_cps_call(s, self.cps)) {
                        let mut sp = it.span;
                        own_walk(it, &mut |s| {
                            if is_cps_call(s, self.cps) && sp.is_synthetic() {
                                sp = s.span;
                            }
                        });
                        self.flag(sp, "cps call outside a convertible pattern");
                    }
                }
            }
            i += 1;
        }
    }

    fn stmt_call<'t>(&self, t: &'t Term) -> Option<&'t Term> {
        match &t.kind {
            TermKind::Call(..) if is_cps_call(t, self.cps) => Some(t),
            TermKind::Assign(_, e) if is_cps_call(e, self.cps) => Some(e),
            _ => None,
        }
    }
}

/// Check every cps call against the convertible patterns.
pub fn check_cps_convertible(p: &Program) -> ConvertibilityVerdict {
    let cps = cps_callables(p);
    let globals = p.global_names();
    let mut offending = Vec::new();
    for f in &p.funs {
        if !f.is_cps() {
            continue;
        }
        let mut shared = globals.clone();
        shared.extend(extruded_variables(f, false));
        let mut c = Checker {
            fun: f.name.clone(),
            cps: &cps,
            shared,
            out: Vec::new(),
        };
        c.list(&f.body, true);
        offending.extend(c.out);
    }
    ConvertibilityVerdict {
        convertible: offending.is_empty(),
        offending,
    }
}

/// Call sites of inner functions per function, split into tail and
/// non-tail; used by the convertibility and liftability checks.
pub fn label_functions(report: &SplitReport) -> BTreeSet<Name> {
    report.generated.values().flatten().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{parse, print};

    fn explicit(src: &str) -> Program {
        make_flow_explicit(&parse(src).unwrap()).unwrap().normalize()
    }

    fn same(a: &Program, src: &str) {
        let b = parse(src).unwrap().normalize();
        assert_eq!(print(a), print(&b));
    }

    #[test]
    fn goto_after_yield() {
        let p = explicit("cps void f(int rc) { yield(); rc = 0; }");
        same(&p, "cps void f(int rc) { yield(); goto f__l1; f__l1: { rc = 0; } }");
    }

    #[test]
    fn labelled_block_gets_explicit_exit() {
        let p = explicit(
            "cps int f(int rc) { if (rc < 0) { yield(); rc = 0; } print(\"rc = \", rc); return rc; }",
        );
        same(
            &p,
            "cps int f(int rc) {
                if (rc < 0) { yield(); goto f__l2; f__l2: { rc = 0; goto f__l1; } }
                f__l1: { print(\"rc = \", rc); return rc; }
            }",
        );
    }

    #[test]
    fn while_loop_is_desugared() {
        let src = "
            bool timeout;
            cps int read() { return 0; }
            cps void write() { return; }
            void reset_timeout() { timeout = false; }
            cps void f() {
                while (!timeout) {
                    int rc = read();
                    if (rc <= 0) break;
                    write();
                }
                reset_timeout();
            }";
        let p = explicit(src);
        let expect = src.replace(
            "cps void f() {
                while (!timeout) {
                    int rc = read();
                    if (rc <= 0) break;
                    write();
                }
                reset_timeout();
            }",
            "cps void f() {
                int rc;
                f__l1: {
                    if (!timeout) {
                        rc = read(); goto f__l3;
                        f__l3: { if (rc <= 0) { goto f__l2; } write(); goto f__l1; }
                    } else { goto f__l2; }
                }
                f__l2: { reset_timeout(); }
            }",
        );
        same(&p, &expect);
    }

    #[test]
    fn goto_becomes_tail_call() {
        let p = parse("cps void f(int rc) { yield(); rc = 0; }").unwrap();
        let (q, report) = split_program(&p).unwrap();
        assert_eq!(report.generated_count(), 1);
        same(
            &q,
            "cps void f(int rc) { cps void f__l1() { rc = 0; } yield(); return f__l1(); }",
        );
        assert!(check_cps_convertible(&q).convertible);
    }

    #[test]
    fn goto_free_function_unchanged() {
        let p = parse("cps int f(int a) { int b = a + 1; return g(b); } cps int g(int x) { return x; }")
            .unwrap()
            .normalize();
        let (q, report) = split_program(&p).unwrap();
        assert_eq!(report.generated_count(), 0);
        assert_eq!(p, q.normalize());
    }

    #[test]
    fn convertibility_patterns() {
        let ok = parse(
            "cps int g(int a, int b) { return a + b; }
             cps int f(int e) { int x; int y = 2; x = f(e); return g(x, y); }",
        )
        .unwrap();
        assert!(check_cps_convertible(&ok).convertible);

        let bad = parse(
            "cps int g(int a) { return a; }
             cps int f(int e) { int x; x = f(e); print(x); return g(x); }",
        )
        .unwrap();
        let v = check_cps_convertible(&bad);
        assert!(!v.convertible);
        assert_eq!(v.offending.len(), 1);
        assert_eq!(v.offending[0].span.line, 2);
        assert!(v.offending[0].reason.contains("interleaved"));

        let set_done = parse(
            "cps void set() { return; } cps void done() { return; }
             cps void f() { set(); return done(); }",
        )
        .unwrap();
        assert!(check_cps_convertible(&set_done).convertible);
    }

    #[test]
    fn global_argument_is_shared() {
        let p = parse(
            "int gl; cps int g(int a, int b) { return a; }
             cps int f(int e) { int x; x = f(e); return g(x, gl); }",
        )
        .unwrap();
        assert!(!check_cps_convertible(&p).convertible);
    }

    #[test]
    fn nested_cps_calls_are_hoisted() {
        let p = parse(
            "cps int g(int a) { return a; }
             int gl;
             cps int f(int e) { gl = g(e); print(g(1) + g(2)); return gl; }",
        )
        .unwrap();
        let (q, _) = split_program(&p).unwrap();
        let v = check_cps_convertible(&q);
        assert!(v.convertible, "{:?}\n{}", v.offending, print(&q));
    }
}
