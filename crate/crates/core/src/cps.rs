//! Conversion of lifted, cps-convertible programs into continuation
//! operations. Each cps function becomes a block of direct-style
//! statements ending in one terminator that pushes frames onto the
//! continuation and hands it back to the trampoline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::frontend::{expr_str, stmt_text};
use crate::lang::{FunDecl, Global, Name, Primitive, Program, Span, Term, TermKind};

pub type Fid = u32;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    /// Index into `CpsProgram::funs`.
    Fun(usize),
    Prim(Primitive),
}

/// Dense table of continuation targets: cps functions first, in program
/// order, then the scheduler primitives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FunTable {
    pub entries: Vec<(Name, Option<usize>, Entry)>,
    index: BTreeMap<Name, Fid>,
}

impl FunTable {
    fn add(&mut self, n: Name, arity: Option<usize>, e: Entry) -> Fid {
        let id = self.entries.len() as Fid;
        self.index.insert(n.clone(), id);
        self.entries.push((n, arity, e));
        id
    }

    pub fn fid(&self, n: &str) -> Option<Fid> {
        self.index.get(n).copied()
    }

    pub fn get(&self, fid: Fid) -> &(Name, Option<usize>, Entry) {
        &self.entries[fid as usize]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, (n, a, e)) in self.entries.iter().enumerate() {
            let kind = match e {
                Entry::Fun(_) => "cps",
                Entry::Prim(_) => "primitive",
            };
            let arity = a.map_or("*".to_string(), |a| a.to_string());
            let _ = writeln!(s, "#{i} {n}/{arity} {kind}");
        }
        s
    }
}

/// One argument of a pushed frame. A hole receives the value the
/// continuation is invoked with.
#[derive(Clone, Debug, PartialEq)]
pub enum Slot {
    Arg(Term),
    Hole,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Push {
    pub fid: Fid,
    pub target: Name,
    pub args: Vec<Slot>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Terminator {
    /// `invoke(k, e)`.
    InvokeValue(Term),
    /// `push(k, f*, args); invoke(k)`.
    PushInvoke(Push),
    /// `push(k, g*, ys); push(k, f*, args); invoke(k)`; the ys are
    /// evaluated before `f` runs.
    PushPushInvoke { second: Push, first: Push },
    /// Conditional choice between two blocks.
    Branch(Term, Box<Block>, Box<Block>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub stmts: Vec<Term>,
    pub term: Terminator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpsFun {
    pub name: Name,
    pub fid: Fid,
    pub params: Vec<Name>,
    pub locals: Vec<Name>,
    pub body: Block,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpsProgram {
    pub globals: Vec<Global>,
    pub natives: Vec<FunDecl>,
    pub funs: Vec<CpsFun>,
    pub table: FunTable,
    pub entry: Name,
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum CpsError {
    #[error("{fun}: not cps-convertible at {span}: {reason}")]
    NotConvertible { fun: Name, span: Span, reason: String },
    #[error("{fun}: inner function {inner} left after lifting")]
    NotLifted { fun: Name, inner: Name },
    #[error("unknown cps function {0}")]
    Unknown(Name),
}

struct Conv<'a> {
    fun: Name,
    table: &'a FunTable,
    cps: &'a BTreeSet<Name>,
}

fn is_cps_call<'t>(t: &'t Term, cps: &BTreeSet<Name>) -> Option<(&'t Name, &'t [Term])> {
    match &t.kind {
        TermKind::Call(f, args) if cps.contains(f) => Some((f, args)),
        _ => None,
    }
}

fn has_cps_call(t: &Term, cps: &BTreeSet<Name>) -> bool {
    t.contains(&|u| is_cps_call(u, cps).is_some())
}

impl Conv<'_> {
    fn fail<T>(&self, span: Span, reason: &str) -> Result<T, CpsError> {
        Err(CpsError::NotConvertible {
            fun: self.fun.clone(),
            span,
            reason: reason.to_string(),
        })
    }

    fn push(&self, f: &Name, args: &[Term], hole: Option<&Name>) -> Result<Push, CpsError> {
        let fid = self.table.fid(f).ok_or_else(|| CpsError::Unknown(f.clone()))?;
        for a in args {
            if has_cps_call(a, self.cps) {
                return self.fail(a.span, "cps call in the arguments of a cps call");
            }
        }
        let args = args
            .iter()
            .map(|a| match (&a.kind, hole) {
                (TermKind::Var(y), Some(x)) if y == x => Slot::Hole,
                _ => Slot::Arg(a.clone()),
            })
            .collect();
        Ok(Push {
            fid,
            target: f.clone(),
            args,
        })
    }

    fn needs_block(&self, t: &Term) -> bool {
        t.contains(&|u| matches!(u.kind, TermKind::Return(_)) || is_cps_call(u, self.cps).is_some())
    }

    fn list(&self, items: &[&Term]) -> Result<Block, CpsError> {
        let mut stmts = Vec::new();
        let mut i = 0;
        while i < items.len() {
            let it = items[i];
            match &it.kind {
                TermKind::Return(e) => {
                    let term = match is_cps_call(e, self.cps) {
                        Some((f, args)) => Terminator::PushInvoke(self.push(f, args, None)?),
                        None if has_cps_call(e, self.cps) => return self.fail(e.span, "cps call inside an expression"),
                        None => Terminator::InvokeValue((**e).clone()),
                    };
                    return Ok(Block { stmts, term });
                }
                TermKind::If(c, a, b) if self.needs_block(it) => {
                    if has_cps_call(c, self.cps) {
                        return self.fail(c.span, "cps call in a condition");
                    }
                    let rest = &items[i + 1..];
                    let mut ta = a.seq_items();
                    ta.extend_from_slice(rest);
                    let mut tb = b.seq_items();
                    tb.extend_from_slice(rest);
                    let term = Terminator::Branch((**c).clone(), Box::new(self.list(&ta)?), Box::new(self.list(&tb)?));
                    return Ok(Block { stmts, term });
                }
                TermKind::LetRec(ds, _) => {
                    return Err(CpsError::NotLifted {
                        fun: self.fun.clone(),
                        inner: ds[0].name.clone(),
                    })
                }
                TermKind::Goto(_) | TermKind::Labelled(..) => return self.fail(it.span, "goto left after splitting"),
                _ => {}
            }
            let (target, call) = match &it.kind {
                TermKind::Assign(x, e) => (Some(x), &**e),
                _ => (None, it),
            };
            let Some((f, args)) = is_cps_call(call, self.cps) else {
                if has_cps_call(it, self.cps) {
                    return self.fail(it.span, "cps call outside a convertible pattern");
                }
                stmts.push(it.clone());
                i += 1;
                continue;
            };
            let first = self.push(f, args, None)?;
            let next = items.get(i + 1).map(|t| &t.kind);
            let term = match next {
                // A trailing cps call, or one followed by `return;`.
                None => Terminator::PushInvoke(first),
                Some(TermKind::Return(e)) if e.is_unit() => Terminator::PushInvoke(first),
                Some(TermKind::Return(e)) => match is_cps_call(e, self.cps) {
                    Some((g, gargs)) => Terminator::PushPushInvoke {
                        second: self.push(g, gargs, target)?,
                        first,
                    },
                    None => return self.fail(e.span, "cps call not followed by a tail call"),
                },
                Some(TermKind::Call(..)) => {
                    let g = is_cps_call(items[i + 1], self.cps);
                    let ends = matches!(items.get(i + 2).map(|t| &t.kind), Some(TermKind::Return(e)) if e.is_unit())
                        || i + 2 == items.len();
                    match g {
                        Some((g, gargs)) if ends => Terminator::PushPushInvoke {
                            second: self.push(g, gargs, target)?,
                            first,
                        },
                        _ => return self.fail(items[i + 1].span, "statement between a cps call and its continuation"),
                    }
                }
                Some(_) => return self.fail(items[i + 1].span, "statement between a cps call and its continuation"),
            };
            return Ok(Block { stmts, term });
        }
        // Falling off the end passes the value of the last statement.
        let term = match stmts.pop() {
            Some(last) => Terminator::InvokeValue(last),
            None => Terminator::InvokeValue(Term::unit()),
        };
        Ok(Block { stmts, term })
    }
}

/// Convert a lifted, cps-convertible program.
pub fn cps_convert(p: &Program) -> Result<CpsProgram, CpsError> {
    let mut table = FunTable::default();
    let mut idx = 0;
    for f in &p.funs {
        if f.is_cps() {
            table.add(f.name.clone(), Some(f.params.len()), Entry::Fun(idx));
            idx += 1;
        }
    }
    for prim in Primitive::ALL {
        table.add(crate::lang::name(prim.name()), None, Entry::Prim(prim));
    }
    let cps: BTreeSet<Name> = table.entries.iter().map(|(n, _, _)| n.clone()).collect();
    let mut funs = Vec::new();
    let mut natives = Vec::new();
    for f in &p.funs {
        if let Some(h) = f.inner().first() {
            return Err(CpsError::NotLifted {
                fun: f.name.clone(),
                inner: h.name.clone(),
            });
        }
        if !f.is_cps() {
            natives.push(f.clone());
            continue;
        }
        let conv = Conv {
            fun: f.name.clone(),
            table: &table,
            cps: &cps,
        };
        let body = conv.list(&f.body.seq_items())?;
        funs.push(CpsFun {
            name: f.name.clone(),
            fid: table.fid(&f.name).unwrap_or_default(),
            params: f.param_names().cloned().collect(),
            locals: f.locals.iter().map(|l| l.name.clone()).collect(),
            body,
        });
    }
    Ok(CpsProgram {
        globals: p.globals.clone(),
        natives,
        funs,
        table,
        entry: p.entry.clone(),
    })
}

/// A second-push argument that is not a non-shared local of its function.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EarlyEvalSite {
    pub fun: Name,
    pub target: Name,
    pub arg: String,
}

impl fmt::Display for EarlyEvalSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: argument `{}` of {} is shared", self.fun, self.arg, self.target)
    }
}

/// Every argument evaluated early (before the first call runs) must be a
/// local variable whose address is never taken; anything else could be
/// changed by the first call.
pub fn verify_early_evaluation_safety(ir: &CpsProgram) -> Vec<EarlyEvalSite> {
    let mut out = Vec::new();
    for f in &ir.funs {
        let locals: BTreeSet<&Name> = f.params.iter().chain(&f.locals).collect();
        let mut extruded = BTreeSet::new();
        visit_blocks(&f.body, &mut |b| {
            for t in b.stmts.iter().chain(block_exprs(b)) {
                t.walk(&mut |u| {
                    if let TermKind::AddrOf(x) = &u.kind {
                        extruded.insert(x.clone());
                    }
                });
            }
        });
        visit_blocks(&f.body, &mut |b| {
            if let Terminator::PushPushInvoke { second, .. } = &b.term {
                for s in &second.args {
                    let Slot::Arg(a) = s else { continue };
                    let ok = matches!(&a.kind, TermKind::Var(y) if locals.contains(y) && !extruded.contains(y));
                    if !ok {
                        out.push(EarlyEvalSite {
                            fun: f.name.clone(),
                            target: second.target.clone(),
                            arg: expr_str(a, 0),
                        });
                    }
                }
            }
        });
    }
    out
}

fn block_exprs(b: &Block) -> Vec<&Term> {
    let mut v = Vec::new();
    match &b.term {
        Terminator::InvokeValue(e) | Terminator::Branch(e, _, _) => v.push(e),
        _ => {}
    }
    for p in pushes(&b.term) {
        for s in &p.args {
            if let Slot::Arg(a) = s {
                v.push(a);
            }
        }
    }
    v
}

fn pushes(t: &Terminator) -> Vec<&Push> {
    match t {
        Terminator::PushInvoke(p) => vec![p],
        Terminator::PushPushInvoke { second, first } => vec![second, first],
        _ => vec![],
    }
}

fn visit_blocks(b: &Block, f: &mut dyn FnMut(&Block)) {
    f(b);
    if let Terminator::Branch(_, x, y) = &b.term {
        visit_blocks(x, f);
        visit_blocks(y, f);
    }
}

/// Structural check: no cps call outside a terminator.
pub fn no_stray_cps_calls(ir: &CpsProgram) -> bool {
    let cps: BTreeSet<Name> = ir.table.entries.iter().map(|(n, _, _)| n.clone()).collect();
    ir.funs.iter().all(|f| {
        let mut ok = true;
        visit_blocks(&f.body, &mut |b| {
            for t in &b.stmts {
                ok &= !has_cps_call(t, &cps);
            }
            for t in block_exprs(b) {
                ok &= !has_cps_call(t, &cps);
            }
        });
        ok
    })
}

// ---------------------------------------------------------------------------
// Text form

fn slot_str(s: &Slot) -> String {
    match s {
        Slot::Arg(a) => expr_str(a, 0),
        Slot::Hole => "_".to_string(),
    }
}

fn push_str(p: &Push) -> String {
    let a: Vec<String> = p.args.iter().map(slot_str).collect();
    format!("push k, #{} {}*({});", p.fid, p.target, a.join(", "))
}

fn dump_block(b: &Block, ind: usize, out: &mut String) {
    for s in &b.stmts {
        out.push_str(&stmt_text(s, ind));
    }
    let pad = "    ".repeat(ind);
    match &b.term {
        Terminator::InvokeValue(e) => {
            let _ = writeln!(out, "{pad}invoke k, {};", expr_str(e, 0));
        }
        Terminator::PushInvoke(p) => {
            let _ = writeln!(out, "{pad}{} invoke k;", push_str(p));
        }
        Terminator::PushPushInvoke { second, first } => {
            let _ = writeln!(out, "{pad}{} {} invoke k;", push_str(second), push_str(first));
        }
        Terminator::Branch(c, x, y) => {
            let _ = writeln!(out, "{pad}if ({}) {{", expr_str(c, 0));
            dump_block(x, ind + 1, out);
            let _ = writeln!(out, "{pad}}} else {{");
            dump_block(y, ind + 1, out);
            let _ = writeln!(out, "{pad}}}");
        }
    }
}

impl CpsProgram {
    pub fn fun(&self, n: &str) -> Option<&CpsFun> {
        self.funs.iter().find(|f| &*f.name == n)
    }

    /// Canonical text of the IR, function table included.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.table.dump());
        for g in &self.globals {
            let _ = writeln!(out, "global {} {} = {};", g.ty, g.name, g.init);
        }
        for n in &self.natives {
            out.push('\n');
            out.push_str(&crate::frontend::print_fun_decl(n));
        }
        for f in &self.funs {
            let _ = write!(out, "\ncps #{} {}({})", f.fid, f.name, f.params.join(", "));
            if !f.locals.is_empty() {
                let _ = write!(out, " locals({})", f.locals.join(", "));
            }
            out.push_str(" {\n");
            dump_block(&f.body, 1, &mut out);
            out.push_str("}\n");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse;

    fn conv(src: &str) -> CpsProgram {
        cps_convert(&parse(src).unwrap()).unwrap()
    }

    #[test]
    fn return_value_invokes() {
        let ir = conv("cps int f(int a) { return a + 1; }");
        assert_eq!(ir.funs[0].body.term, Terminator::InvokeValue(parse_expr("a + 1")));
    }

    fn parse_expr(e: &str) -> Term {
        let p = parse(&format!("cps int __e(int a, int x, int y) {{ return {e}; }}")).unwrap();
        match &p.funs[0].body.kind {
            TermKind::Return(e) => (**e).clone(),
            _ => unreachable!(),
        }
    }

    #[test]
    fn tail_call_pushes_once() {
        let ir = conv("cps int g(int a) { return a; } cps int f(int a) { return g(a); }");
        let Terminator::PushInvoke(p) = &ir.fun("f").unwrap().body.term else { panic!() };
        assert_eq!((&*p.target, p.args.len()), ("g", 1));
    }

    #[test]
    fn call_then_tail_call_pushes_twice() {
        let ir = conv(
            "cps int h() { return 1; } cps int g(int x, int y) { return x + y; }
             cps int f(int y) { int x; x = h(); return g(x, y); }",
        );
        let Terminator::PushPushInvoke { second, first } = &ir.fun("f").unwrap().body.term else {
            panic!()
        };
        assert_eq!(&*first.target, "h");
        assert_eq!(second.args, vec![Slot::Hole, Slot::Arg(Term::var("y"))]);
        assert!(ir.dump().contains("push k, #1 g*(_, y); push k, #0 h*(); invoke k;"));
    }

    #[test]
    fn void_patterns() {
        let ir = conv("cps void g(int y) { return; } cps void f(int y) { yield(); g(y); return; }");
        let Terminator::PushPushInvoke { second, first } = &ir.fun("f").unwrap().body.term else {
            panic!()
        };
        assert_eq!((&*first.target, &*second.target), ("yield", "g"));
        let ir = conv("cps void f() { yield(); return; }");
        assert!(matches!(ir.funs[0].body.term, Terminator::PushInvoke(_)));
    }

    #[test]
    fn nested_cps_call_is_rejected() {
        let p = parse("cps int g() { return 1; } cps int f() { int x; x = g() + 1; return x; }").unwrap();
        assert!(cps_convert(&p).is_err());
    }

    #[test]
    fn shared_early_argument_is_flagged() {
        let mut ir = conv(
            "int gl; cps int h() { return 1; } cps int g(int x, int y) { return x + y; }
             cps int f(int y) { int x; x = h(); return g(x, y); }",
        );
        assert!(verify_early_evaluation_safety(&ir).is_empty());
        let f = ir.funs.iter_mut().find(|f| &*f.name == "f").unwrap();
        if let Terminator::PushPushInvoke { second, .. } = &mut f.body.term {
            second.args[1] = Slot::Arg(Term::var("gl"));
        }
        assert_eq!(verify_early_evaluation_safety(&ir).len(), 1);
    }

    #[test]
    fn fall_through_passes_last_value() {
        let ir = conv("cps void f(int a) { print(a); }");
        assert_eq!(ir.funs[0].body.stmts.len(), 0);
        assert!(matches!(&ir.funs[0].body.term, Terminator::InvokeValue(t) if matches!(t.kind, TermKind::NativeCall(..))));
        assert!(no_stray_cps_calls(&ir));
    }
}
