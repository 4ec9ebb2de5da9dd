//! Unified AST shared by the passes and the interpreters, plus the static
//! analyses every pass relies on: tail positions, free variables, extruded
//! variables and the cps call-graph constraint.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

pub type Name = Arc<str>;

pub fn name(s: &str) -> Name {
    Arc::from(s)
}

/// Scheduler handles returned by `link`.
pub const SCHED_LOOP: i64 = 0;
pub const SCHED_POOL: i64 = 1;

/// Readiness directions accepted by `io_wait`.
pub const IO_IN: i64 = 0;
pub const IO_OUT: i64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Value {
    Unit,
    Bool(bool),
    Int(i64),
    /// Opaque heap cell id.
    Ref(u64),
}

impl Value {
    pub fn as_int(self) -> Option<i64> {
        match self {
            Value::Int(n) => Some(n),
            _ => None,
        }
    }

    pub fn as_bool(self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(b),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Unit => write!(f, "()"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(n) => write!(f, "{n}"),
            Value::Ref(r) => write!(f, "&{r}"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub line: u32,
    pub column: u32,
    pub length: u32,
}

impl Span {
    pub fn new(line: u32, column: u32, length: u32) -> Self {
        Span { line, column, length }
    }

    pub fn is_synthetic(&self) -> bool {
        self.line == 0
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_synthetic() {
            write!(f, "<generated>")
        } else {
            write!(f, "{}:{}", self.line, self.column)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Ty {
    Void,
    Int,
    Bool,
    Cond,
    Ptr(Box<Ty>),
}

impl fmt::Display for Ty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ty::Void => write!(f, "void"),
            Ty::Int => write!(f, "int"),
            Ty::Bool => write!(f, "bool"),
            Ty::Cond => write!(f, "cond"),
            Ty::Ptr(t) => write!(f, "{t}*"),
        }
    }
}

/// Direct-style operations. All of them run to completion without giving
/// control back to the scheduler.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Builtin {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    Neg,
    Not,
    And,
    Or,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    /// `print("prefix", e)`; the prefix is empty for `print(e)`.
    Print(String),
    Alloc,
    Free,
    CondNew,
    Signal,
    SignalAll,
    /// `accept(key)`: take one pending connection from a listening key.
    Accept,
    Spawn(Name),
}

impl Builtin {
    pub fn binary_symbol(&self) -> Option<&'static str> {
        Some(match self {
            Builtin::Add => "+",
            Builtin::Sub => "-",
            Builtin::Mul => "*",
            Builtin::Div => "/",
            Builtin::Rem => "%",
            Builtin::And => "&&",
            Builtin::Or => "||",
            Builtin::Eq => "==",
            Builtin::Ne => "!=",
            Builtin::Lt => "<",
            Builtin::Le => "<=",
            Builtin::Gt => ">",
            Builtin::Ge => ">=",
            _ => return None,
        })
    }

    /// Binding strength used by the parser and the printer.
    pub fn precedence(&self) -> u8 {
        match self {
            Builtin::Or => 1,
            Builtin::And => 2,
            Builtin::Eq | Builtin::Ne => 3,
            Builtin::Lt | Builtin::Le | Builtin::Gt | Builtin::Ge => 4,
            Builtin::Add | Builtin::Sub => 5,
            Builtin::Mul | Builtin::Div | Builtin::Rem => 6,
            _ => 7,
        }
    }

    pub fn is_pure(&self) -> bool {
        self.binary_symbol().is_some() || matches!(self, Builtin::Neg | Builtin::Not)
    }

    /// Name used for the call syntax `name(args)`.
    pub fn call_name(&self) -> Option<&'static str> {
        Some(match self {
            Builtin::Alloc => "alloc",
            Builtin::Free => "free",
            Builtin::CondNew => "cond_new",
            Builtin::Signal => "signal",
            Builtin::SignalAll => "signal_all",
            Builtin::Accept => "accept",
            _ => return None,
        })
    }

    pub fn from_call_name(s: &str) -> Option<Builtin> {
        Some(match s {
            "alloc" => Builtin::Alloc,
            "free" => Builtin::Free,
            "cond_new" => Builtin::CondNew,
            "signal" => Builtin::Signal,
            "signal_all" => Builtin::SignalAll,
            "accept" => Builtin::Accept,
            _ => return None,
        })
    }

    /// Evaluate a pure operator. `None` means the operands are ill-typed.
    pub fn eval_pure(&self, args: &[Value]) -> Option<Value> {
        use Value::*;
        Some(match (self, args) {
            (Builtin::Add, [Int(a), Int(b)]) => Int(a.wrapping_add(*b)),
            (Builtin::Sub, [Int(a), Int(b)]) => Int(a.wrapping_sub(*b)),
            (Builtin::Mul, [Int(a), Int(b)]) => Int(a.wrapping_mul(*b)),
            (Builtin::Div, [Int(a), Int(b)]) if *b != 0 => Int(a.wrapping_div(*b)),
            (Builtin::Rem, [Int(a), Int(b)]) if *b != 0 => Int(a.wrapping_rem(*b)),
            (Builtin::Neg, [Int(a)]) => Int(a.wrapping_neg()),
            (Builtin::Not, [Bool(a)]) => Bool(!a),
            (Builtin::And, [Bool(a), Bool(b)]) => Bool(*a && *b),
            (Builtin::Or, [Bool(a), Bool(b)]) => Bool(*a || *b),
            (Builtin::Eq, [a, b]) => Bool(a == b),
            (Builtin::Ne, [a, b]) => Bool(a != b),
            (Builtin::Lt, [Int(a), Int(b)]) => Bool(a < b),
            (Builtin::Le, [Int(a), Int(b)]) => Bool(a <= b),
            (Builtin::Gt, [Int(a), Int(b)]) => Bool(a > b),
            (Builtin::Ge, [Int(a), Int(b)]) => Bool(a >= b),
            _ => return None,
        })
    }
}

/// Suspending operations provided by the scheduler. They are cps functions
/// and may only be called from cps code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Yield,
    Sleep,
    IoWait,
    Wait,
    Link,
}

impl Primitive {
    pub const ALL: [Primitive; 5] = [
        Primitive::Yield,
        Primitive::Sleep,
        Primitive::IoWait,
        Primitive::Wait,
        Primitive::Link,
    ];

    pub fn from_name(s: &str) -> Option<Primitive> {
        Some(match s {
            "yield" => Primitive::Yield,
            "sleep" => Primitive::Sleep,
            "io_wait" => Primitive::IoWait,
            "wait" => Primitive::Wait,
            "link" => Primitive::Link,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Yield => "yield",
            Primitive::Sleep => "sleep",
            Primitive::IoWait => "io_wait",
            Primitive::Wait => "wait",
            Primitive::Link => "link",
        }
    }

    /// Accepted argument counts (the condition variable on `sleep` and
    /// `io_wait` is optional).
    pub fn arities(self) -> &'static [usize] {
        match self {
            Primitive::Yield => &[0],
            Primitive::Sleep => &[1, 2],
            Primitive::IoWait => &[2, 3],
            Primitive::Wait => &[1],
            Primitive::Link => &[1],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Term {
    pub kind: TermKind,
    pub span: Span,
}

/// Structural equality; spans are ignored.
impl PartialEq for Term {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TermKind {
    Const(Value),
    Var(Name),
    Assign(Name, Box<Term>),
    Seq(Box<Term>, Box<Term>),
    If(Box<Term>, Box<Term>, Box<Term>),
    /// A group of mutually visible inner functions scoped over `rest`.
    LetRec(Vec<FunDecl>, Box<Term>),
    Call(Name, Vec<Term>),
    Return(Box<Term>),
    While(Box<Term>, Box<Term>),
    Break,
    Goto(Name),
    Labelled(Name, Box<Term>),
    AddrOf(Name),
    Deref(Box<Term>),
    SetRef(Box<Term>, Box<Term>),
    NativeCall(Builtin, Vec<Term>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FunKind {
    Cps,
    Native,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: Name,
    pub ty: Ty,
}

impl Param {
    pub fn new(name: Name, ty: Ty) -> Self {
        Param { name, ty }
    }

    pub fn int(n: &str) -> Self {
        Param::new(self::name(n), Ty::Int)
    }
}

#[derive(Clone, Debug)]
pub struct FunDecl {
    pub name: Name,
    pub kind: FunKind,
    pub ret: Ty,
    pub params: Vec<Param>,
    /// Function-scoped local variables, all initialised to unit on entry.
    pub locals: Vec<Param>,
    pub body: Term,
    pub span: Span,
}

impl PartialEq for FunDecl {
    fn eq(&self, o: &Self) -> bool {
        self.name == o.name
            && self.kind == o.kind
            && self.ret == o.ret
            && self.params == o.params
            && self.locals == o.locals
            && self.body == o.body
    }
}

impl FunDecl {
    pub fn new(name: &str, kind: FunKind, params: &[&str], body: Term) -> Self {
        FunDecl {
            name: self::name(name),
            kind,
            ret: Ty::Int,
            params: params.iter().map(|p| Param::int(p)).collect(),
            locals: Vec::new(),
            body,
            span: Span::default(),
        }
    }

    pub fn is_cps(&self) -> bool {
        self.kind == FunKind::Cps
    }

    pub fn param_names(&self) -> impl Iterator<Item = &Name> {
        self.params.iter().map(|p| &p.name)
    }

    /// Parameters and locals: every variable this function binds.
    pub fn bound_names(&self) -> BTreeSet<Name> {
        self.params
            .iter()
            .chain(self.locals.iter())
            .map(|p| p.name.clone())
            .collect()
    }

    /// Inner functions defined directly or transitively in this body.
    pub fn inner(&self) -> Vec<&FunDecl> {
        let mut out = Vec::new();
        collect_inner(&self.body, &mut out);
        out
    }
}

fn collect_inner<'a>(t: &'a Term, out: &mut Vec<&'a FunDecl>) {
    if let TermKind::LetRec(decls, _) = &t.kind {
        for d in decls {
            out.push(d);
            collect_inner(&d.body, out);
        }
    }
    for c in t.children() {
        collect_inner(c, out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Global {
    pub name: Name,
    pub ty: Ty,
    pub init: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Program {
    pub globals: Vec<Global>,
    pub funs: Vec<FunDecl>,
    pub entry: Name,
}

impl Program {
    pub fn fun(&self, n: &str) -> Option<&FunDecl> {
        self.funs.iter().find(|f| &*f.name == n)
    }

    pub fn fun_mut(&mut self, n: &str) -> Option<&mut FunDecl> {
        self.funs.iter_mut().find(|f| &*f.name == n)
    }

    pub fn global_names(&self) -> BTreeSet<Name> {
        self.globals.iter().map(|g| g.name.clone()).collect()
    }

    /// Every function, top-level or inner, mapped to its kind.
    pub fn kinds(&self) -> BTreeMap<Name, FunKind> {
        let mut m = BTreeMap::new();
        for f in &self.funs {
            m.insert(f.name.clone(), f.kind);
            for h in f.inner() {
                m.insert(h.name.clone(), h.kind);
            }
        }
        m
    }

    /// Names that denote cps callees: cps functions and scheduler primitives.
    pub fn cps_names(&self) -> BTreeSet<Name> {
        let mut s: BTreeSet<Name> = self
            .kinds()
            .into_iter()
            .filter(|(_, k)| *k == FunKind::Cps)
            .map(|(n, _)| n)
            .collect();
        for p in Primitive::ALL {
            s.insert(name(p.name()));
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Construction helpers

impl Term {
    pub fn new(kind: TermKind) -> Self {
        Term {
            kind,
            span: Span::default(),
        }
    }

    pub fn at(kind: TermKind, span: Span) -> Self {
        Term { kind, span }
    }

    pub fn with_span(mut self, span: Span) -> Self {
        self.span = span;
        self
    }

    pub fn unit() -> Self {
        Term::new(TermKind::Const(Value::Unit))
    }

    pub fn int(n: i64) -> Self {
        Term::new(TermKind::Const(Value::Int(n)))
    }

    pub fn bool(b: bool) -> Self {
        Term::new(TermKind::Const(Value::Bool(b)))
    }

    pub fn val(v: Value) -> Self {
        Term::new(TermKind::Const(v))
    }

    pub fn var(x: &str) -> Self {
        Term::new(TermKind::Var(name(x)))
    }

    pub fn var_n(x: Name) -> Self {
        Term::new(TermKind::Var(x))
    }

    pub fn assign(x: &str, e: Term) -> Self {
        Term::new(TermKind::Assign(name(x), Box::new(e)))
    }

    pub fn assign_n(x: Name, e: Term) -> Self {
        Term::new(TermKind::Assign(x, Box::new(e)))
    }

    pub fn seq(a: Term, b: Term) -> Self {
        Term::new(TermKind::Seq(Box::new(a), Box::new(b)))
    }

    /// Right-nested sequence of a statement list; the empty list is unit.
    pub fn block(items: Vec<Term>) -> Self {
        let mut it = items.into_iter().rev();
        match it.next() {
            None => Term::unit(),
            Some(last) => it.fold(last, |acc, t| Term::seq(t, acc)),
        }
    }

    pub fn if_(c: Term, a: Term, b: Term) -> Self {
        Term::new(TermKind::If(Box::new(c), Box::new(a), Box::new(b)))
    }

    pub fn letrec(decls: Vec<FunDecl>, rest: Term) -> Self {
        Term::new(TermKind::LetRec(decls, Box::new(rest)))
    }

    pub fn call(f: &str, args: Vec<Term>) -> Self {
        Term::new(TermKind::Call(name(f), args))
    }

    pub fn call_n(f: Name, args: Vec<Term>) -> Self {
        Term::new(TermKind::Call(f, args))
    }

    pub fn ret(e: Term) -> Self {
        Term::new(TermKind::Return(Box::new(e)))
    }

    pub fn while_(c: Term, b: Term) -> Self {
        Term::new(TermKind::While(Box::new(c), Box::new(b)))
    }

    pub fn goto(l: &str) -> Self {
        Term::new(TermKind::Goto(name(l)))
    }

    pub fn labelled(l: &str, t: Term) -> Self {
        Term::new(TermKind::Labelled(name(l), Box::new(t)))
    }

    pub fn native(b: Builtin, args: Vec<Term>) -> Self {
        Term::new(TermKind::NativeCall(b, args))
    }

    pub fn is_unit(&self) -> bool {
        matches!(self.kind, TermKind::Const(Value::Unit))
    }

    /// Immediate sub-terms in a fixed order. Inner function bodies of a
    /// `LetRec` come first, then its scope.
    pub fn children(&self) -> Vec<&Term> {
        use TermKind::*;
        match &self.kind {
            Const(_) | Var(_) | Break | Goto(_) | AddrOf(_) => vec![],
            Assign(_, e) | Return(e) | Labelled(_, e) | Deref(e) => vec![e],
            Seq(a, b) | While(a, b) | SetRef(a, b) => vec![a, b],
            If(c, a, b) => vec![c, a, b],
            LetRec(ds, rest) => ds.iter().map(|d| &d.body).chain([&**rest]).collect(),
            Call(_, args) | NativeCall(_, args) => args.iter().collect(),
        }
    }

    pub fn children_mut(&mut self) -> Vec<&mut Term> {
        use TermKind::*;
        match &mut self.kind {
            Const(_) | Var(_) | Break | Goto(_) | AddrOf(_) => vec![],
            Assign(_, e) | Return(e) | Labelled(_, e) | Deref(e) => vec![e],
            Seq(a, b) | While(a, b) | SetRef(a, b) => vec![a, b],
            If(c, a, b) => vec![c, a, b],
            LetRec(ds, rest) => ds
                .iter_mut()
                .map(|d| &mut d.body)
                .chain([&mut **rest])
                .collect(),
            Call(_, args) | NativeCall(_, args) => args.iter_mut().collect(),
        }
    }

    /// Pre-order visit of every sub-term, including inner function bodies.
    pub fn walk<'a>(&'a self, f: &mut dyn FnMut(&'a Term)) {
        f(self);
        for c in self.children() {
            c.walk(f);
        }
    }

    pub fn walk_mut(&mut self, f: &mut dyn FnMut(&mut Term)) {
        f(self);
        for c in self.children_mut() {
            c.walk_mut(f);
        }
    }

    /// Follow a child-index path.
    pub fn at_path(&self, path: &[usize]) -> Option<&Term> {
        let mut cur = self;
        for &i in path {
            cur = *cur.children().get(i)?;
        }
        Some(cur)
    }

    /// Flatten a right- or left-nested `Seq` chain into its statements.
    pub fn flatten_seq(self) -> Vec<Term> {
        let mut out = Vec::new();
        fn go(t: Term, out: &mut Vec<Term>) {
            match t.kind {
                TermKind::Seq(a, b) => {
                    go(*a, out);
                    go(*b, out);
                }
                _ => out.push(t),
            }
        }
        go(self, &mut out);
        out
    }

    pub fn seq_items(&self) -> Vec<&Term> {
        let mut out = Vec::new();
        fn go<'a>(t: &'a Term, out: &mut Vec<&'a Term>) {
            match &t.kind {
                TermKind::Seq(a, b) => {
                    go(a, out);
                    go(b, out);
                }
                _ => out.push(t),
            }
        }
        go(self, &mut out);
        out
    }

    /// Canonical shape: sequences right-nested, no unit statements in the
    /// middle of a sequence.
    pub fn normalize(self) -> Term {
        let span = self.span;
        let kind = match self.kind {
            TermKind::Seq(..) => {
                let items: Vec<Term> = Term::new(self.kind)
                    .flatten_seq()
                    .into_iter()
                    .map(Term::normalize)
                    .collect();
                let n = items.len();
                let kept: Vec<Term> = items
                    .into_iter()
                    .enumerate()
                    .filter(|(i, t)| *i + 1 == n || !t.is_unit())
                    .map(|(_, t)| t)
                    .collect();
                return Term::block(kept);
            }
            TermKind::LetRec(ds, rest) => TermKind::LetRec(
                ds.into_iter()
                    .map(|mut d| {
                        d.body = d.body.normalize();
                        d
                    })
                    .collect(),
                Box::new(rest.normalize()),
            ),
            k => {
                let mut t = Term::at(k, span);
                for c in t.children_mut() {
                    let taken = std::mem::replace(c, Term::unit());
                    *c = taken.normalize();
                }
                return t;
            }
        };
        Term::at(kind, span)
    }

    pub fn contains(&self, pred: &dyn Fn(&Term) -> bool) -> bool {
        if pred(self) {
            return true;
        }
        self.children().into_iter().any(|c| c.contains(pred))
    }
}

impl Program {
    pub fn normalize(mut self) -> Program {
        for f in &mut self.funs {
            f.body = std::mem::replace(&mut f.body, Term::unit()).normalize();
        }
        self
    }
}

// ---------------------------------------------------------------------------
// Analyses

pub type TermPath = Vec<usize>;

/// Positions (child-index paths from the function body) in tail position.
///
/// `if` branches and the right of a sequence inherit tailness; the scope of a
/// `letrec` inherits it; each inner function body is tail within its own
/// function; the operand of `return` is always tail; nothing under `while`
/// is tail.
pub fn tail_positions(f: &FunDecl) -> BTreeSet<TermPath> {
    let mut out = BTreeSet::new();
    mark_tail(&f.body, true, &mut Vec::new(), &mut out);
    out
}

fn mark_tail(t: &Term, tail: bool, path: &mut TermPath, out: &mut BTreeSet<TermPath>) {
    use TermKind::*;
    if tail {
        out.insert(path.clone());
    }
    let flags: Vec<bool> = match &t.kind {
        If(..) => vec![false, tail, tail],
        Seq(..) => vec![false, tail],
        LetRec(ds, _) => ds.iter().map(|_| true).chain([tail]).collect(),
        Labelled(..) => vec![tail],
        Return(_) => vec![true],
        _ => t.children().iter().map(|_| false).collect(),
    };
    for (i, (c, flag)) in t.children().into_iter().zip(flags).enumerate() {
        path.push(i);
        mark_tail(c, flag, path, out);
        path.pop();
    }
}

/// Variables occurring free in `t`. Assignment targets and address-of
/// operands count as uses; inner functions bind their params and locals.
pub fn free_variables(t: &Term) -> BTreeSet<Name> {
    let mut out = BTreeSet::new();
    fv(t, &mut out);
    out
}

fn fv(t: &Term, out: &mut BTreeSet<Name>) {
    match &t.kind {
        TermKind::Var(x) | TermKind::AddrOf(x) => {
            out.insert(x.clone());
        }
        TermKind::Assign(x, e) => {
            out.insert(x.clone());
            fv(e, out);
        }
        TermKind::LetRec(ds, rest) => {
            for d in ds {
                out.extend(fun_free_variables(d));
            }
            fv(rest, out);
        }
        _ => {
            for c in t.children() {
                fv(c, out);
            }
        }
    }
}

/// Free variables of a function: body variables not bound by its params or
/// locals.
pub fn fun_free_variables(d: &FunDecl) -> BTreeSet<Name> {
    let bound = d.bound_names();
    free_variables(&d.body)
        .into_iter()
        .filter(|x| !bound.contains(x))
        .collect()
}

/// Variables whose address is taken in `f` or its inner functions, restricted
/// to variables bound by those functions. With `ignore_discarded`, an
/// address-of whose value is immediately thrown away does not count.
pub fn extruded_variables(f: &FunDecl, ignore_discarded: bool) -> BTreeSet<Name> {
    let mut bound = f.bound_names();
    for h in f.inner() {
        bound.extend(h.bound_names());
    }
    let mut out = BTreeSet::new();
    collect_addr(&f.body, false, ignore_discarded, &mut out);
    out.retain(|x| bound.contains(x));
    out
}

fn collect_addr(t: &Term, discarded: bool, ignore_discarded: bool, out: &mut BTreeSet<Name>) {
    match &t.kind {
        TermKind::AddrOf(x) => {
            if !(discarded && ignore_discarded) {
                out.insert(x.clone());
            }
        }
        TermKind::Seq(a, b) => {
            collect_addr(a, true, ignore_discarded, out);
            collect_addr(b, discarded, ignore_discarded, out);
        }
        TermKind::While(c, b) => {
            collect_addr(c, false, ignore_discarded, out);
            collect_addr(b, true, ignore_discarded, out);
        }
        _ => {
            for c in t.children() {
                collect_addr(c, false, ignore_discarded, out);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CallGraphViolation {
    pub caller: Name,
    pub callee: Name,
    pub span: Span,
}

impl fmt::Display for CallGraphViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: native function `{}` calls cps function `{}`",
            self.span, self.caller, self.callee
        )
    }
}

/// A cps function may only be called by a cps function.
pub fn check_cps_callgraph(p: &Program) -> Vec<CallGraphViolation> {
    let cps = p.cps_names();
    let mut out = Vec::new();
    let visit = |f: &FunDecl, out: &mut Vec<CallGraphViolation>| {
        if f.kind != FunKind::Native {
            return;
        }
        f.body.walk(&mut |t| {
            if let TermKind::Call(g, _) = &t.kind {
                if cps.contains(g) {
                    out.push(CallGraphViolation {
                        caller: f.name.clone(),
                        callee: g.clone(),
                        span: t.span,
                    });
                }
            }
        });
    };
    for f in &p.funs {
        visit(f, &mut out);
        for h in f.inner() {
            visit(h, &mut out);
        }
    }
    out
}

/// Fresh-name supply producing `<base>__l<counter>` names that avoid a set of
/// taken names.
#[derive(Clone, Debug, Default)]
pub struct NameSupply {
    taken: BTreeSet<Name>,
    counter: usize,
}

impl NameSupply {
    pub fn new(taken: BTreeSet<Name>) -> Self {
        NameSupply { taken, counter: 0 }
    }

    pub fn for_program(p: &Program) -> Self {
        let mut taken = p.global_names();
        for f in &p.funs {
            taken.insert(f.name.clone());
            taken.extend(f.bound_names());
            for h in f.inner() {
                taken.insert(h.name.clone());
                taken.extend(h.bound_names());
            }
            f.body.walk(&mut |t| match &t.kind {
                TermKind::Labelled(l, _) | TermKind::Goto(l) => {
                    taken.insert(l.clone());
                }
                _ => {}
            });
        }
        NameSupply::new(taken)
    }

    pub fn fresh(&mut self, base: &str) -> Name {
        loop {
            self.counter += 1;
            let candidate = name(&format!("{base}__l{}", self.counter));
            if self.taken.insert(candidate.clone()) {
                return candidate;
            }
        }
    }

    pub fn is_taken(&self, n: &Name) -> bool {
        self.taken.contains(n)
    }

    pub fn reserve(&mut self, n: &Name) {
        self.taken.insert(n.clone());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paths(v: &[&[usize]]) -> BTreeSet<TermPath> {
        v.iter().map(|p| p.to_vec()).collect()
    }

    #[test]
    fn if_branches_are_tail() {
        let f = FunDecl::new(
            "f",
            FunKind::Cps,
            &[],
            Term::if_(Term::var("p"), Term::var("m"), Term::var("n")),
        );
        assert_eq!(tail_positions(&f), paths(&[&[], &[1], &[2]]));
    }

    #[test]
    fn only_right_of_seq_is_tail() {
        let f = FunDecl::new("f", FunKind::Cps, &[], Term::seq(Term::var("m"), Term::var("n")));
        assert_eq!(tail_positions(&f), paths(&[&[], &[1]]));
    }

    #[test]
    fn call_arguments_are_not_tail() {
        let f = FunDecl::new(
            "f",
            FunKind::Cps,
            &[],
            Term::call("g", vec![Term::call("h", vec![])]),
        );
        assert_eq!(tail_positions(&f), paths(&[&[]]));
    }

    #[test]
    fn while_body_and_return_operand() {
        let body = Term::seq(
            Term::while_(Term::var("c"), Term::ret(Term::call("g", vec![]))),
            Term::unit(),
        );
        let f = FunDecl::new("f", FunKind::Cps, &[], body);
        // The return operand under the loop is tail (return exits f), the
        // loop body itself is not.
        assert_eq!(tail_positions(&f), paths(&[&[], &[0, 1, 0], &[1]]));
    }

    #[test]
    fn free_variables_basic() {
        assert!(free_variables(&Term::int(3)).is_empty());
        let t = Term::seq(Term::assign("x", Term::var("y")), Term::var("z"));
        let expect: BTreeSet<Name> = ["x", "y", "z"].iter().map(|s| name(s)).collect();
        assert_eq!(free_variables(&t), expect);
    }

    #[test]
    fn free_variables_respects_inner_binders() {
        let mut h = FunDecl::new("h", FunKind::Cps, &["a"], Term::seq(Term::var("a"), Term::var("rc")));
        h.locals.push(Param::int("tmp"));
        h.body = Term::seq(Term::assign("tmp", Term::var("a")), Term::var("rc"));
        let t = Term::letrec(vec![h], Term::call("h", vec![Term::int(1)]));
        let expect: BTreeSet<Name> = [name("rc")].into_iter().collect();
        assert_eq!(free_variables(&t), expect);
    }

    #[test]
    fn extruded_with_and_without_filter() {
        let mut f = FunDecl::new(
            "f",
            FunKind::Cps,
            &["x"],
            Term::block(vec![
                Term::new(TermKind::AddrOf(name("x"))),
                Term::assign("p", Term::new(TermKind::AddrOf(name("y")))),
                Term::unit(),
            ]),
        );
        f.locals = vec![Param::int("y"), Param::new(name("p"), Ty::Ptr(Box::new(Ty::Int)))];
        let all: BTreeSet<Name> = [name("x"), name("y")].into_iter().collect();
        assert_eq!(extruded_variables(&f, false), all);
        let retained: BTreeSet<Name> = [name("y")].into_iter().collect();
        assert_eq!(extruded_variables(&f, true), retained);
    }

    #[test]
    fn callgraph_violation_and_ok() {
        let native = FunDecl::new("f", FunKind::Native, &[], Term::call("g", vec![]));
        let cps = FunDecl::new("g", FunKind::Cps, &[], Term::unit());
        let p = Program {
            globals: vec![],
            funs: vec![native, cps.clone()],
            entry: name("g"),
        };
        let v = check_cps_callgraph(&p);
        assert_eq!(v.len(), 1);
        assert_eq!((&*v[0].caller, &*v[0].callee), ("f", "g"));

        let caller = FunDecl::new(
            "h",
            FunKind::Cps,
            &[],
            Term::native(Builtin::Accept, vec![Term::int(0)]),
        );
        let p = Program {
            globals: vec![],
            funs: vec![caller, cps],
            entry: name("h"),
        };
        assert!(check_cps_callgraph(&p).is_empty());
        let empty = Program {
            globals: vec![],
            funs: vec![],
            entry: name("main"),
        };
        assert!(check_cps_callgraph(&empty).is_empty());
    }

    #[test]
    fn normalize_right_nests() {
        let t = Term::seq(Term::seq(Term::var("a"), Term::var("b")), Term::var("c"));
        let n = t.normalize();
        assert_eq!(n, Term::block(vec![Term::var("a"), Term::var("b"), Term::var("c")]));
    }
}
