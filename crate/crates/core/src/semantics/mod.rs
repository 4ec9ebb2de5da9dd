//! Big-step reference semantics for the core language: a naive interpreter
//! following the textbook rules and an optimised one with split
//! environments, store cleaning and compact closures.
//!
//! Both interpreters consume one unit of fuel per rule application and
//! apply rules in the same order, so their fuel behaviour coincides.

mod diff;
mod gen;
mod lift;
pub mod program;

pub use diff::{
    diff_theorem1, diff_theorem2, interpreter_suite, lifting_suite, Diff1, Diff2, SuiteReport, SUITE_TERM_SIZE,
};
pub use gen::{gen_term, Profile};
pub use lift::{check_liftable_core, inner_functions, lift_core, liftable_targets};

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::lang::{Builtin, FunDecl, Name, Primitive, Term, TermKind, Value};

pub type Loc = u64;

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("stuck: {0}")]
    Stuck(String),
    #[error("out of fuel")]
    OutOfFuel,
}

fn stuck<T>(msg: impl Into<String>) -> Result<T, EvalError> {
    Err(EvalError::Stuck(msg.into()))
}

/// Partial map from locations to values.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Store(pub BTreeMap<Loc, Value>);

impl Store {
    pub fn new() -> Self {
        Store::default()
    }

    pub fn get(&self, l: Loc) -> Option<Value> {
        self.0.get(&l).copied()
    }

    /// `s[l -> v]`: extend or overwrite.
    pub fn set(&mut self, l: Loc, v: Value) {
        self.0.insert(l, v);
    }

    /// `gc(rho, s)`: drop every location bound in `rho`.
    pub fn clean(&mut self, env: &VarEnv) {
        for (_, l) in env.iter() {
            self.0.remove(&l);
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> Vec<Value> {
        self.0.values().copied().collect()
    }
}

/// Store plus the separate heap used by boxed variables. Store locations
/// and heap cells draw ids from one counter so a `Ref` is unambiguous.
#[derive(Clone, Debug, Default)]
pub struct Memory {
    pub store: Store,
    pub heap: BTreeMap<u64, Value>,
    pub next: u64,
}

impl Memory {
    pub fn with_store(store: Store) -> Self {
        let next = store.0.keys().next_back().map_or(0, |l| l + 1);
        Memory {
            store,
            heap: BTreeMap::new(),
            next,
        }
    }

    pub fn fresh(&mut self) -> Loc {
        let l = self.next;
        self.next += 1;
        l
    }

    pub fn alloc(&mut self) -> Value {
        let l = self.fresh();
        self.heap.insert(l, Value::Unit);
        Value::Ref(l)
    }

    pub fn deref(&self, r: Value) -> Result<Value, EvalError> {
        let Value::Ref(l) = r else {
            return stuck(format!("dereference of non-pointer {r}"));
        };
        match self.heap.get(&l).copied().or_else(|| self.store.get(l)) {
            Some(v) => Ok(v),
            None => stuck(format!("dangling pointer &{l}")),
        }
    }

    pub fn set_ref(&mut self, r: Value, v: Value) -> Result<(), EvalError> {
        let Value::Ref(l) = r else {
            return stuck(format!("store through non-pointer {r}"));
        };
        if let Some(cell) = self.heap.get_mut(&l) {
            *cell = v;
        } else if self.store.0.contains_key(&l) {
            self.store.set(l, v);
        } else {
            return stuck(format!("dangling pointer &{l}"));
        }
        Ok(())
    }

    pub fn free(&mut self, r: Value) -> Result<(), EvalError> {
        match r {
            Value::Ref(l) if self.heap.remove(&l).is_some() => Ok(()),
            _ => stuck(format!("free of {r}")),
        }
    }
}

struct VarNode {
    name: Name,
    loc: Loc,
    next: VarEnv,
}

/// Association list of variables to locations; the leftmost binding wins.
#[derive(Clone, Default)]
pub struct VarEnv(Option<Rc<VarNode>>);

impl VarEnv {
    pub fn empty() -> Self {
        VarEnv(None)
    }

    pub fn from_pairs(pairs: &[(&str, Loc)]) -> Self {
        let mut e = VarEnv::empty();
        for (n, l) in pairs.iter().rev() {
            e = e.bind(crate::lang::name(n), *l);
        }
        e
    }

    pub fn bind(&self, name: Name, loc: Loc) -> VarEnv {
        VarEnv(Some(Rc::new(VarNode {
            name,
            loc,
            next: self.clone(),
        })))
    }

    pub fn lookup(&self, x: &str) -> Option<Loc> {
        self.iter().find(|(n, _)| &**n == x).map(|(_, l)| l)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Name, Loc)> + '_ {
        let mut cur = self.0.as_deref();
        std::iter::from_fn(move || {
            let n = cur?;
            cur = n.next.0.as_deref();
            Some((n.name.clone(), n.loc))
        })
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_none()
    }

    /// `self · other`.
    pub fn concat(&self, other: &VarEnv) -> VarEnv {
        if other.is_empty() {
            return self.clone();
        }
        let items: Vec<_> = self.iter().collect();
        let mut e = other.clone();
        for (n, l) in items.into_iter().rev() {
            e = e.bind(n, l);
        }
        e
    }

    /// Restriction of the domain to names outside `drop`.
    pub fn without(&self, drop: &BTreeSet<Name>) -> VarEnv {
        let items: Vec<_> = self.iter().filter(|(n, _)| !drop.contains(n)).collect();
        let mut e = VarEnv::empty();
        for (n, l) in items.into_iter().rev() {
            e = e.bind(n, l);
        }
        e
    }

    pub fn domain(&self) -> BTreeSet<Name> {
        self.iter().map(|(n, _)| n).collect()
    }

    fn ptr(&self) -> usize {
        self.0.as_ref().map_or(0, |r| Rc::as_ptr(r) as usize)
    }
}

impl fmt::Debug for VarEnv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.iter()).finish()
    }
}

pub struct Closure<'t> {
    pub decl: &'t FunDecl,
    pub env: VarEnv,
    pub fenv: FunEnv<'t>,
}

enum FunNode<'t> {
    One(Name, Rc<Closure<'t>>, FunEnv<'t>),
    /// A group of mutually recursive functions: every member sees the
    /// whole group.
    Group(&'t [FunDecl], VarEnv, FunEnv<'t>),
}

/// Environment of functions.
#[derive(Clone, Default)]
pub struct FunEnv<'t>(Option<Rc<FunNode<'t>>>);

impl<'t> FunEnv<'t> {
    pub fn empty() -> Self {
        FunEnv(None)
    }

    pub fn extend(&self, f: Name, c: Rc<Closure<'t>>) -> FunEnv<'t> {
        FunEnv(Some(Rc::new(FunNode::One(f, c, self.clone()))))
    }

    pub fn group(&self, decls: &'t [FunDecl], env: VarEnv) -> FunEnv<'t> {
        FunEnv(Some(Rc::new(FunNode::Group(decls, env, self.clone()))))
    }

    pub fn lookup(&self, f: &str) -> Option<Rc<Closure<'t>>> {
        let mut cur = self.clone();
        while let Some(node) = cur.0.clone() {
            match &*node {
                FunNode::One(n, c, next) => {
                    if &**n == f {
                        return Some(c.clone());
                    }
                    cur = next.clone();
                }
                FunNode::Group(decls, env, next) => {
                    if let Some(d) = decls.iter().find(|d| &*d.name == f) {
                        return Some(Rc::new(Closure {
                            decl: d,
                            env: env.clone(),
                            fenv: FunEnv(Some(node.clone())),
                        }));
                    }
                    cur = next.clone();
                }
            }
        }
        None
    }

    /// `Env(F)`: every variable environment reachable from the closures.
    pub fn envs(&self) -> Vec<VarEnv> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        let mut stack = vec![self.clone()];
        while let Some(FunEnv(Some(node))) = stack.pop() {
            if !seen.insert(Rc::as_ptr(&node) as usize) {
                continue;
            }
            match &*node {
                FunNode::One(_, c, next) => {
                    out.push(c.env.clone());
                    stack.push(c.fenv.clone());
                    stack.push(next.clone());
                }
                FunNode::Group(_, env, next) => {
                    out.push(env.clone());
                    stack.push(next.clone());
                }
            }
        }
        out
    }

    fn closures(&self) -> Vec<Rc<Closure<'t>>> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        let mut stack = vec![self.clone()];
        while let Some(FunEnv(Some(node))) = stack.pop() {
            if !seen.insert(Rc::as_ptr(&node) as usize) {
                continue;
            }
            match &*node {
                FunNode::One(_, c, next) => {
                    out.push(c.clone());
                    stack.push(c.fenv.clone());
                    stack.push(next.clone());
                }
                FunNode::Group(_, _, next) => stack.push(next.clone()),
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Invariant monitors

static ALIASING_CHECKS: AtomicU64 = AtomicU64::new(0);
static ALIASING_VIOLATIONS: AtomicU64 = AtomicU64::new(0);
static COMPACT_CHECKS: AtomicU64 = AtomicU64::new(0);
static COMPACT_VIOLATIONS: AtomicU64 = AtomicU64::new(0);

/// Process-wide counts of invariant checks and of checks that failed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InvariantCounts {
    pub aliasing_checks: u64,
    pub aliasing_violations: u64,
    pub compact_checks: u64,
    pub compact_violations: u64,
}

pub fn invariant_counts() -> InvariantCounts {
    InvariantCounts {
        aliasing_checks: ALIASING_CHECKS.load(Ordering::Relaxed),
        aliasing_violations: ALIASING_VIOLATIONS.load(Ordering::Relaxed),
        compact_checks: COMPACT_CHECKS.load(Ordering::Relaxed),
        compact_violations: COMPACT_VIOLATIONS.load(Ordering::Relaxed),
    }
}

/// True when no location is bound under two different names across `envs`.
pub fn aliasing_free<'a>(envs: impl IntoIterator<Item = &'a VarEnv>) -> bool {
    let mut owner: BTreeMap<Loc, Name> = BTreeMap::new();
    let mut seen = HashSet::new();
    for e in envs {
        if !seen.insert(e.ptr()) {
            continue;
        }
        for (n, l) in e.iter() {
            match owner.get(&l) {
                Some(m) if *m != n => return false,
                Some(_) => {}
                None => {
                    owner.insert(l, n);
                }
            }
        }
    }
    true
}

fn check_aliasing(f: &FunEnv<'_>, envs: &[&VarEnv]) {
    ALIASING_CHECKS.fetch_add(1, Ordering::Relaxed);
    let captured = f.envs();
    if !aliasing_free(captured.iter().chain(envs.iter().copied())) {
        ALIASING_VIOLATIONS.fetch_add(1, Ordering::Relaxed);
    }
}

pub fn is_compact(c: &Closure<'_>) -> bool {
    c.decl.param_names().all(|x| c.env.lookup(x).is_none())
}

fn check_compact(f: &FunEnv<'_>) {
    COMPACT_CHECKS.fetch_add(1, Ordering::Relaxed);
    if !f.closures().iter().all(|c| is_compact(c)) {
        COMPACT_VIOLATIONS.fetch_add(1, Ordering::Relaxed);
    }
}

// ---------------------------------------------------------------------------
// Shared evaluation helpers

/// Truth value of a condition; integers follow C.
pub fn truthy(v: Value) -> Option<bool> {
    match v {
        Value::Bool(b) => Some(b),
        Value::Int(n) => Some(n != 0),
        _ => None,
    }
}

/// Non-local exits of the surface language.
pub(crate) enum Ctrl {
    Err(EvalError),
    Return(Value),
    Break,
    Goto(Name),
}

impl From<EvalError> for Ctrl {
    fn from(e: EvalError) -> Self {
        Ctrl::Err(e)
    }
}

/// Requests the naive interpreter cannot serve by itself.
pub enum Effect<'a> {
    Print(String),
    Primitive(Primitive, &'a [Value]),
    Native(&'a Builtin, &'a [Value]),
}

/// Memory and side effects seen by the naive interpreter.
pub trait Host {
    fn mem(&mut self) -> &mut Memory;
    fn effect(&mut self, e: Effect<'_>) -> Result<Value, EvalError>;
}

/// A host with private memory and no scheduler: prints are collected and
/// every scheduling request is stuck.
#[derive(Default)]
pub struct PureHost {
    pub memory: Memory,
    pub output: Vec<String>,
}

impl Host for PureHost {
    fn mem(&mut self) -> &mut Memory {
        &mut self.memory
    }

    fn effect(&mut self, e: Effect<'_>) -> Result<Value, EvalError> {
        match e {
            Effect::Print(line) => {
                self.output.push(line);
                Ok(Value::Unit)
            }
            Effect::Primitive(p, _) => stuck(format!("{} needs a scheduler", p.name())),
            Effect::Native(b, _) => stuck(format!("{b:?} needs a scheduler")),
        }
    }
}

pub fn print_line(label: &str, args: &[Value]) -> String {
    let vals: Vec<String> = args.iter().map(|v| v.to_string()).collect();
    format!("{label}{}", vals.join(" "))
}

/// One derivation step for the optional trace.
fn trace_line(depth: usize, rule: &str, t: &Term) -> String {
    let head = core_str(t);
    let head: String = head.chars().take(60).collect();
    format!("{:indent$}({rule}) {head}", "", indent = depth * 2)
}

fn rule_name(t: &Term) -> &'static str {
    use TermKind::*;
    match &t.kind {
        Const(_) => "val",
        Var(_) => "var",
        Assign(..) => "assign",
        Seq(..) => "seq",
        If(..) => "if",
        LetRec(..) => "letrec",
        Call(..) => "call",
        NativeCall(..) => "op",
        Deref(_) | SetRef(..) | AddrOf(_) => "heap",
        Return(_) => "return",
        While(..) => "while",
        Break => "break",
        Goto(_) => "goto",
        Labelled(..) => "label",
    }
}

// ---------------------------------------------------------------------------
// Naive interpreter

/// Interpreter for the naive rules, extended with the surface statements
/// (return, loops, gotos, locals, pointers) so it can also run whole
/// programs.
pub struct Naive<'t, H: Host> {
    pub host: H,
    fuel: u64,
    pub steps: u64,
    pub trace: Option<Vec<String>>,
    depth: usize,
    pub check_invariants: bool,
    _t: std::marker::PhantomData<&'t ()>,
}

impl<'t, H: Host> Naive<'t, H> {
    pub fn new(host: H, fuel: u64) -> Self {
        Naive {
            host,
            fuel,
            steps: 0,
            trace: None,
            depth: 0,
            check_invariants: true,
            _t: std::marker::PhantomData,
        }
    }

    fn tick(&mut self, t: &Term) -> Result<(), EvalError> {
        if self.fuel == 0 {
            return Err(EvalError::OutOfFuel);
        }
        self.fuel -= 1;
        self.steps += 1;
        if let Some(tr) = &mut self.trace {
            tr.push(trace_line(self.depth, rule_name(t), t));
        }
        Ok(())
    }

    /// Evaluate a closed-over term. Surface exits escaping `t` are errors.
    pub fn eval(&mut self, t: &'t Term, env: &VarEnv, f: &FunEnv<'t>) -> Result<Value, EvalError> {
        match self.term(t, env, f) {
            Ok(v) | Err(Ctrl::Return(v)) => Ok(v),
            Err(Ctrl::Err(e)) => Err(e),
            Err(Ctrl::Break) => stuck("break outside a loop"),
            Err(Ctrl::Goto(l)) => stuck(format!("goto {l}: no such label")),
        }
    }

    fn term(&mut self, t: &'t Term, env: &VarEnv, f: &FunEnv<'t>) -> Result<Value, Ctrl> {
        self.tick(t)?;
        self.depth += 1;
        let r = self.term_inner(t, env, f);
        self.depth -= 1;
        r
    }

    fn read(&mut self, env: &VarEnv, x: &str) -> Result<Value, EvalError> {
        let Some(l) = env.lookup(x) else {
            return stuck(format!("unbound variable {x}"));
        };
        match self.host.mem().store.get(l) {
            Some(v) => Ok(v),
            None => stuck(format!("variable {x} has no location in the store")),
        }
    }

    fn write(&mut self, env: &VarEnv, x: &str, v: Value) -> Result<(), EvalError> {
        let Some(l) = env.lookup(x) else {
            return stuck(format!("unbound variable {x}"));
        };
        let mem = self.host.mem();
        if mem.store.get(l).is_none() {
            return stuck(format!("variable {x} has no location in the store"));
        }
        mem.store.set(l, v);
        Ok(())
    }

    fn term_inner(&mut self, t: &'t Term, env: &VarEnv, f: &FunEnv<'t>) -> Result<Value, Ctrl> {
        use TermKind::*;
        match &t.kind {
            Const(v) => Ok(*v),
            Var(x) => Ok(self.read(env, x)?),
            Assign(x, a) => {
                let v = self.term(a, env, f)?;
                self.write(env, x, v)?;
                Ok(Value::Unit)
            }
            Seq(a, b) => {
                let r = match self.term(a, env, f) {
                    Ok(_) => self.term(b, env, f),
                    Err(e) => Err(e),
                };
                match r {
                    Err(Ctrl::Goto(l)) => self.resume(t, l, env, f),
                    r => r,
                }
            }
            If(c, a, b) => {
                let cv = self.term(c, env, f)?;
                match truthy(cv) {
                    Some(true) => self.term(a, env, f),
                    Some(false) => self.term(b, env, f),
                    None => Err(EvalError::Stuck(format!("condition is {cv}")).into()),
                }
            }
            LetRec(decls, rest) => {
                let f2 = self.bind_decls(decls, env, f);
                if self.check_invariants {
                    check_aliasing(&f2, &[env]);
                }
                self.term(rest, env, &f2)
            }
            Call(g, args) => self.call(g, args, env, f),
            NativeCall(b, args) => self.native(b, args, env, f),
            AddrOf(x) => match env.lookup(x) {
                Some(l) => Ok(Value::Ref(l)),
                None => Err(EvalError::Stuck(format!("unbound variable {x}")).into()),
            },
            Deref(p) => {
                let r = self.term(p, env, f)?;
                Ok(self.host.mem().deref(r)?)
            }
            SetRef(p, a) => {
                let r = self.term(p, env, f)?;
                let v = self.term(a, env, f)?;
                self.host.mem().set_ref(r, v)?;
                Ok(Value::Unit)
            }
            Return(a) => {
                let v = self.term(a, env, f)?;
                Err(Ctrl::Return(v))
            }
            While(c, body) => loop {
                let cv = self.term(c, env, f)?;
                match truthy(cv) {
                    Some(true) => {}
                    Some(false) => return Ok(Value::Unit),
                    None => return Err(EvalError::Stuck(format!("condition is {cv}")).into()),
                }
                match self.term(body, env, f) {
                    Ok(_) => {}
                    Err(Ctrl::Break) => return Ok(Value::Unit),
                    Err(e) => return Err(e),
                }
            },
            Break => Err(Ctrl::Break),
            Goto(l) => Err(Ctrl::Goto(l.clone())),
            Labelled(_, s) => self.term(s, env, f),
        }
    }

    /// Continue `t` from label `l` if one of its statements carries it.
    fn resume(&mut self, t: &'t Term, l: Name, env: &VarEnv, f: &FunEnv<'t>) -> Result<Value, Ctrl> {
        let items = t.seq_items();
        if find_label(&items, &l).is_none() {
            return Err(Ctrl::Goto(l));
        }
        self.list(&items, Some(&l), env, f)
    }

    fn bind_decls(&mut self, decls: &'t [FunDecl], env: &VarEnv, f: &FunEnv<'t>) -> FunEnv<'t> {
        if let [d] = decls {
            let c = Closure {
                decl: d,
                env: env.clone(),
                fenv: f.clone(),
            };
            f.extend(d.name.clone(), Rc::new(c))
        } else {
            f.group(decls, env.clone())
        }
    }

    /// Run a statement list, resuming at `start` when a goto targets one
    /// of its labels.
    fn list(
        &mut self,
        items: &[&'t Term],
        start: Option<&Name>,
        env: &VarEnv,
        f: &FunEnv<'t>,
    ) -> Result<Value, Ctrl> {
        let mut i = match start {
            None => 0,
            Some(l) => match find_label(items, l) {
                Some(j) => j,
                None => return Err(Ctrl::Goto(l.clone())),
            },
        };
        let mut pending = start.cloned();
        let mut last = Value::Unit;
        while i < items.len() {
            let item = items[i];
            let r = match (&item.kind, pending.take()) {
                (TermKind::LetRec(decls, rest), Some(l)) if !is_label(item, &l) => {
                    // The label lives further down, inside the scope of
                    // these functions.
                    self.tick(item).map_err(Ctrl::Err)?;
                    let f2 = self.bind_decls(decls, env, f);
                    let rest_items = rest.seq_items();
                    self.list(&rest_items, Some(&l), env, &f2)
                }
                _ => self.term(item, env, f),
            };
            match r {
                Ok(v) => {
                    last = v;
                    i += 1;
                }
                Err(Ctrl::Goto(l)) => match find_label(items, &l) {
                    Some(j) => {
                        i = j;
                        pending = Some(l);
                    }
                    None => return Err(Ctrl::Goto(l)),
                },
                Err(e) => return Err(e),
            }
        }
        Ok(last)
    }

    fn call(&mut self, g: &Name, args: &'t [Term], env: &VarEnv, f: &FunEnv<'t>) -> Result<Value, Ctrl> {
        let Some(clo) = f.lookup(g) else {
            if let Some(p) = Primitive::from_name(g) {
                let vals = self.args(args, env, f)?;
                if !p.arities().contains(&vals.len()) {
                    return Err(EvalError::Stuck(format!("arity mismatch calling {g}")).into());
                }
                return Ok(self.host.effect(Effect::Primitive(p, &vals))?);
            }
            return Err(EvalError::Stuck(format!("unbound function {g}")).into());
        };
        let d = clo.decl;
        if d.params.len() != args.len() {
            return Err(EvalError::Stuck(format!("arity mismatch calling {g}")).into());
        }
        let vals = self.args(args, env, f)?;
        let mem = self.host.mem();
        let mut inner = VarEnv::empty();
        let mut fresh = Vec::new();
        for (p, v) in d.params.iter().zip(&vals) {
            let l = mem.fresh();
            mem.store.set(l, *v);
            fresh.push((p.name.clone(), l));
        }
        for p in &d.locals {
            let l = mem.fresh();
            mem.store.set(l, Value::Unit);
            fresh.push((p.name.clone(), l));
        }
        for (n, l) in fresh.into_iter().rev() {
            inner = inner.bind(n, l);
        }
        let body_env = inner.concat(&clo.env);
        let body_f = clo.fenv.extend(g.clone(), clo.clone());
        if self.check_invariants {
            check_aliasing(&body_f, &[&body_env]);
        }
        let mut r = self.term(&d.body, &body_env, &body_f);
        if let Err(Ctrl::Goto(l)) = r {
            r = self.resume(&d.body, l, &body_env, &body_f);
        }
        match r {
            Ok(v) | Err(Ctrl::Return(v)) => Ok(v),
            Err(Ctrl::Break) => Err(EvalError::Stuck("break outside a loop".into()).into()),
            Err(Ctrl::Goto(l)) => Err(EvalError::Stuck(format!("goto {l}: no such label")).into()),
            Err(e) => Err(e),
        }
    }

    fn args(&mut self, args: &'t [Term], env: &VarEnv, f: &FunEnv<'t>) -> Result<Vec<Value>, Ctrl> {
        let mut vals = Vec::with_capacity(args.len());
        for a in args {
            vals.push(self.term(a, env, f)?);
        }
        Ok(vals)
    }

    fn native(&mut self, b: &'t Builtin, args: &'t [Term], env: &VarEnv, f: &FunEnv<'t>) -> Result<Value, Ctrl> {
        let vals = self.args(args, env, f)?;
        if b.is_pure() {
            return match b.eval_pure(&vals) {
                Some(v) => Ok(v),
                None => Err(EvalError::Stuck(format!("{b:?} applied to {vals:?}")).into()),
            };
        }
        let mem = self.host.mem();
        Ok(match (b, vals.as_slice()) {
            (Builtin::Alloc, []) => mem.alloc(),
            (Builtin::Free, [r]) => {
                mem.free(*r)?;
                Value::Unit
            }
            (Builtin::Print(label), vs) => self.host.effect(Effect::Print(print_line(label, vs)))?,
            _ => self.host.effect(Effect::Native(b, &vals))?,
        })
    }
}

fn is_label(t: &Term, l: &str) -> bool {
    matches!(&t.kind, TermKind::Labelled(m, _) if &**m == l)
}

/// Position of the item holding label `l`, looking through the scope of
/// trailing function groups.
fn find_label(items: &[&Term], l: &str) -> Option<usize> {
    items.iter().position(|t| match &t.kind {
        TermKind::Labelled(m, _) => &**m == l,
        TermKind::LetRec(_, rest) => find_label(&rest.seq_items(), l).is_some(),
        _ => false,
    })
}

/// Naive evaluation of a core term.
pub fn eval_naive(
    t: &Term,
    env: &VarEnv,
    f: &FunEnv<'_>,
    store: Store,
    fuel: u64,
) -> Result<(Value, Store), EvalError> {
    let host = PureHost {
        memory: Memory::with_store(store),
        output: Vec::new(),
    };
    let mut m = Naive::new(host, fuel);
    // The term borrow only needs to outlive the function environment.
    let v = eval_with(&mut m, t, env, f)?;
    Ok((v, m.host.memory.store))
}

fn eval_with<'t, H: Host>(m: &mut Naive<'t, H>, t: &'t Term, env: &VarEnv, f: &FunEnv<'t>) -> Result<Value, EvalError> {
    m.eval(t, env, f)
}

/// Full result of a run from empty environments, with the step count and
/// an optional derivation trace.
#[derive(Clone, Debug)]
pub struct Run {
    pub result: Result<(Value, Store), EvalError>,
    pub steps: u64,
    pub trace: Vec<String>,
}

pub fn run_naive(t: &Term, fuel: u64, trace: bool) -> Run {
    let mut m = Naive::new(PureHost::default(), fuel);
    if trace {
        m.trace = Some(Vec::new());
    }
    let r = m.eval(t, &VarEnv::empty(), &FunEnv::empty());
    Run {
        result: r.map(|v| (v, std::mem::take(&mut m.host.memory.store))),
        steps: m.steps,
        trace: m.trace.unwrap_or_default(),
    }
}

// ---------------------------------------------------------------------------
// Optimised interpreter

/// Split environment `rhoT · rho`.
#[derive(Clone, Debug, Default)]
pub struct SplitEnv {
    pub tail: VarEnv,
    pub rest: VarEnv,
}

impl SplitEnv {
    pub fn new(tail: VarEnv, rest: VarEnv) -> Self {
        SplitEnv { tail, rest }
    }

    pub fn whole(&self) -> VarEnv {
        self.tail.concat(&self.rest)
    }

    /// `(empty | rhoT · rho)`, used for non-tail premises.
    pub fn demote(&self) -> SplitEnv {
        SplitEnv {
            tail: VarEnv::empty(),
            rest: self.whole(),
        }
    }
}

/// Interpreter for the optimised rules on core terms (plus pure operators
/// and the heap).
pub struct Opt {
    pub memory: Memory,
    fuel: u64,
    pub steps: u64,
    pub trace: Option<Vec<String>>,
    depth: usize,
    pub check_invariants: bool,
}

impl Opt {
    pub fn new(memory: Memory, fuel: u64) -> Self {
        Opt {
            memory,
            fuel,
            steps: 0,
            trace: None,
            depth: 0,
            check_invariants: true,
        }
    }

    fn tick(&mut self, t: &Term) -> Result<(), EvalError> {
        if self.fuel == 0 {
            return Err(EvalError::OutOfFuel);
        }
        self.fuel -= 1;
        self.steps += 1;
        if let Some(tr) = &mut self.trace {
            tr.push(trace_line(self.depth, rule_name(t), t));
        }
        Ok(())
    }

    pub fn eval<'t>(&mut self, t: &'t Term, env: &SplitEnv, f: &FunEnv<'t>) -> Result<Value, EvalError> {
        self.tick(t)?;
        self.depth += 1;
        let r = self.eval_inner(t, env, f);
        self.depth -= 1;
        r
    }

    fn lookup(&self, env: &SplitEnv, x: &str) -> Result<Loc, EvalError> {
        let l = env.tail.lookup(x).or_else(|| env.rest.lookup(x));
        match l {
            Some(l) if self.memory.store.get(l).is_some() => Ok(l),
            Some(_) => stuck(format!("variable {x} has no location in the store")),
            None => stuck(format!("unbound variable {x}")),
        }
    }

    fn eval_inner<'t>(&mut self, t: &'t Term, env: &SplitEnv, f: &FunEnv<'t>) -> Result<Value, EvalError> {
        use TermKind::*;
        match &t.kind {
            Const(v) => {
                self.memory.store.clean(&env.tail);
                Ok(*v)
            }
            Var(x) => {
                let l = self.lookup(env, x)?;
                let v = self.memory.store.get(l).unwrap_or(Value::Unit);
                self.memory.store.clean(&env.tail);
                Ok(v)
            }
            Assign(x, a) => {
                let v = self.eval(a, &env.demote(), f)?;
                let l = self.lookup(env, x)?;
                self.memory.store.set(l, v);
                self.memory.store.clean(&env.tail);
                Ok(Value::Unit)
            }
            Seq(a, b) => {
                self.eval(a, &env.demote(), f)?;
                self.eval(b, env, f)
            }
            If(c, a, b) => {
                let cv = self.eval(c, &env.demote(), f)?;
                match truthy(cv) {
                    Some(true) => self.eval(a, env, f),
                    Some(false) => self.eval(b, env, f),
                    None => stuck(format!("condition is {cv}")),
                }
            }
            LetRec(decls, rest) => {
                let [d] = decls.as_slice() else {
                    return stuck("function groups are outside the core language");
                };
                let params: BTreeSet<Name> = d.param_names().cloned().collect();
                let c = Closure {
                    decl: d,
                    env: env.whole().without(&params),
                    fenv: f.clone(),
                };
                let f2 = f.extend(d.name.clone(), Rc::new(c));
                if self.check_invariants {
                    check_aliasing(&f2, &[&env.tail, &env.rest]);
                    check_compact(&f2);
                }
                self.eval(rest, env, &f2)
            }
            Call(g, args) => {
                let Some(clo) = f.lookup(g) else {
                    return stuck(format!("unbound function {g}"));
                };
                let d = clo.decl;
                if d.params.len() != args.len() {
                    return stuck(format!("arity mismatch calling {g}"));
                }
                let demoted = env.demote();
                let mut vals = Vec::with_capacity(args.len());
                for a in args {
                    vals.push(self.eval(a, &demoted, f)?);
                }
                let mut fresh = Vec::new();
                for (p, v) in d.params.iter().zip(&vals) {
                    let l = self.memory.fresh();
                    self.memory.store.set(l, *v);
                    fresh.push((p.name.clone(), l));
                }
                for p in &d.locals {
                    let l = self.memory.fresh();
                    self.memory.store.set(l, Value::Unit);
                    fresh.push((p.name.clone(), l));
                }
                let mut inner = VarEnv::empty();
                for (n, l) in fresh.into_iter().rev() {
                    inner = inner.bind(n, l);
                }
                let body_env = SplitEnv::new(inner, clo.env.clone());
                let body_f = clo.fenv.extend(g.clone(), clo.clone());
                if self.check_invariants {
                    check_aliasing(&body_f, &[&body_env.tail, &body_env.rest]);
                    check_compact(&body_f);
                }
                let v = self.eval(&d.body, &body_env, &body_f)?;
                self.memory.store.clean(&env.tail);
                Ok(v)
            }
            NativeCall(b, args) => {
                let demoted = env.demote();
                let mut vals = Vec::with_capacity(args.len());
                for a in args {
                    vals.push(self.eval(a, &demoted, f)?);
                }
                let v = if b.is_pure() {
                    match b.eval_pure(&vals) {
                        Some(v) => v,
                        None => return stuck(format!("{b:?} applied to {vals:?}")),
                    }
                } else {
                    match (b, vals.as_slice()) {
                        (Builtin::Alloc, []) => self.memory.alloc(),
                        (Builtin::Free, [r]) => {
                            self.memory.free(*r)?;
                            Value::Unit
                        }
                        _ => return stuck(format!("{b:?} is outside the core language")),
                    }
                };
                self.memory.store.clean(&env.tail);
                Ok(v)
            }
            Deref(p) => {
                let r = self.eval(p, &env.demote(), f)?;
                let v = self.memory.deref(r)?;
                self.memory.store.clean(&env.tail);
                Ok(v)
            }
            SetRef(p, a) => {
                let demoted = env.demote();
                let r = self.eval(p, &demoted, f)?;
                let v = self.eval(a, &demoted, f)?;
                self.memory.set_ref(r, v)?;
                self.memory.store.clean(&env.tail);
                Ok(Value::Unit)
            }
            _ => stuck(format!("{} is outside the core language", rule_name(t))),
        }
    }
}

/// Optimised evaluation of a core term.
pub fn eval_opt(
    t: &Term,
    env: &SplitEnv,
    f: &FunEnv<'_>,
    store: Store,
    fuel: u64,
) -> Result<(Value, Store), EvalError> {
    let mut m = Opt::new(Memory::with_store(store), fuel);
    let v = m.eval(t, env, f)?;
    Ok((v, m.memory.store))
}

pub fn run_opt(t: &Term, fuel: u64, trace: bool) -> Run {
    let mut m = Opt::new(Memory::default(), fuel);
    if trace {
        m.trace = Some(Vec::new());
    }
    let r = m.eval(t, &SplitEnv::default(), &FunEnv::empty());
    Run {
        result: r.map(|v| (v, std::mem::take(&mut m.memory.store))),
        steps: m.steps,
        trace: m.trace.unwrap_or_default(),
    }
}

// ---------------------------------------------------------------------------
// Canonical text for core terms

/// Renders a term in the ML-like notation of the core language.
pub fn core_str(t: &Term) -> String {
    use TermKind::*;
    match &t.kind {
        Const(v) => match v {
            Value::Unit => "1".into(),
            other => other.to_string(),
        },
        Var(x) => x.to_string(),
        Assign(x, a) => format!("{x} := {}", core_atom(a)),
        Seq(a, b) => format!("{}; {}", core_atom(a), core_str(b)),
        If(c, a, b) => format!("if {} then {} else {}", core_atom(c), core_atom(a), core_atom(b)),
        LetRec(ds, rest) => {
            let defs: Vec<String> = ds
                .iter()
                .map(|d| {
                    let ps: Vec<&str> = d.param_names().map(|p| &**p).collect();
                    format!("{}({}) = {}", d.name, ps.join(", "), core_atom(&d.body))
                })
                .collect();
            format!("letrec {} in {}", defs.join(" and "), core_str(rest))
        }
        Call(g, args) => {
            let a: Vec<String> = args.iter().map(core_str).collect();
            format!("{g}({})", a.join(", "))
        }
        NativeCall(b, args) => {
            let a: Vec<String> = args.iter().map(core_atom).collect();
            match (b.binary_symbol(), a.as_slice()) {
                (Some(op), [l, r]) => format!("{l} {op} {r}"),
                _ => format!("{b:?}({})", a.join(", ")),
            }
        }
        _ => crate::frontend::expr_str(t, 0),
    }
}

fn core_atom(t: &Term) -> String {
    use TermKind::*;
    match &t.kind {
        Const(_) | Var(_) | Call(..) => core_str(t),
        _ => format!("({})", core_str(t)),
    }
}

/// No free variables and every called function is defined.
pub fn is_closed(t: &Term) -> bool {
    fn calls_bound(t: &Term, scope: &mut Vec<Name>) -> bool {
        match &t.kind {
            TermKind::Call(g, args) => {
                (scope.contains(g) || Primitive::from_name(g).is_some())
                    && args.iter().all(|a| calls_bound(a, scope))
            }
            TermKind::LetRec(ds, rest) => {
                let n = scope.len();
                scope.extend(ds.iter().map(|d| d.name.clone()));
                let ok = ds.iter().all(|d| calls_bound(&d.body, scope)) && calls_bound(rest, scope);
                scope.truncate(n);
                ok
            }
            _ => t.children().into_iter().all(|c| calls_bound(c, scope)),
        }
    }
    crate::lang::free_variables(t).is_empty() && calls_bound(t, &mut Vec::new())
}

/// Run `f` on a thread with a large stack; the big-step interpreters
/// recurse once per nested derivation.
pub fn with_big_stack<R: Send + 'static>(f: impl FnOnce() -> R + Send + 'static) -> R {
    std::thread::Builder::new()
        .stack_size(1 << 30)
        .spawn(f)
        .expect("spawn evaluator thread")
        .join()
        .expect("evaluator thread panicked")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{FunKind, Term as T};

    fn fun(n: &str, ps: &[&str], body: Term) -> FunDecl {
        FunDecl::new(n, FunKind::Cps, ps, body)
    }

    /// letrec g(x) = (letrec h() = x in h()) in g(1)
    pub(crate) fn gh() -> Term {
        let h = fun("h", &[], T::var("x"));
        let g = fun("g", &["x"], T::letrec(vec![h], T::call("h", vec![])));
        T::letrec(vec![g], T::call("g", vec![T::int(1)]))
    }

    fn gh_lifted() -> Term {
        let h = fun("h", &["y"], T::var("y"));
        let g = fun("g", &["x"], T::letrec(vec![h], T::call("h", vec![T::var("x")])));
        T::letrec(vec![g], T::call("g", vec![T::int(1)]))
    }

    #[test]
    fn naive_stores_match_the_worked_example() {
        let (v, s) = eval_naive(&gh(), &VarEnv::empty(), &FunEnv::empty(), Store::new(), 100).unwrap();
        assert_eq!(v, Value::Int(1));
        assert_eq!(s.values(), vec![Value::Int(1)]);
        let (v, s) = eval_naive(&gh_lifted(), &VarEnv::empty(), &FunEnv::empty(), Store::new(), 100).unwrap();
        assert_eq!(v, Value::Int(1));
        assert_eq!(s.values(), vec![Value::Int(1), Value::Int(1)]);
    }

    #[test]
    fn optimised_store_ends_empty() {
        for t in [gh(), gh_lifted()] {
            let (v, s) = eval_opt(&t, &SplitEnv::default(), &FunEnv::empty(), Store::new(), 100).unwrap();
            assert_eq!(v, Value::Int(1));
            assert!(s.is_empty());
        }
    }

    #[test]
    fn value_rule_cleans_tail_env() {
        let env = SplitEnv::new(VarEnv::from_pairs(&[("x", 0)]), VarEnv::empty());
        let mut s = Store::new();
        s.set(0, Value::Int(7));
        let (v, s) = eval_opt(&T::int(3), &env, &FunEnv::empty(), s, 10).unwrap();
        assert_eq!(v, Value::Int(3));
        assert!(s.is_empty());
        let (v, s) = eval_naive(&T::int(3), &VarEnv::from_pairs(&[("x", 0)]), &FunEnv::empty(), {
            let mut s = Store::new();
            s.set(0, Value::Int(7));
            s
        }, 10)
        .unwrap();
        assert_eq!(v, Value::Int(3));
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn stuck_and_out_of_fuel_are_distinct() {
        let r = eval_naive(&T::var("nope"), &VarEnv::empty(), &FunEnv::empty(), Store::new(), 10);
        assert!(matches!(r, Err(EvalError::Stuck(_))));
        let r = eval_opt(&T::var("nope"), &SplitEnv::default(), &FunEnv::empty(), Store::new(), 10);
        assert!(matches!(r, Err(EvalError::Stuck(_))));
        // letrec f() = f() in f()
        let t = T::letrec(vec![fun("f", &[], T::call("f", vec![]))], T::call("f", vec![]));
        assert_eq!(run_naive(&t, 1000, false).result, Err(EvalError::OutOfFuel));
        assert_eq!(run_opt(&t, 1000, false).result, Err(EvalError::OutOfFuel));
    }

    #[test]
    fn arity_mismatch_is_stuck() {
        let t = T::letrec(vec![fun("f", &["a"], T::var("a"))], T::call("f", vec![]));
        assert!(matches!(run_naive(&t, 100, false).result, Err(EvalError::Stuck(_))));
        assert!(matches!(run_opt(&t, 100, false).result, Err(EvalError::Stuck(_))));
    }

    #[test]
    fn env_lookup_is_leftmost() {
        let e = VarEnv::from_pairs(&[("x", 1), ("x", 2)]);
        assert_eq!(e.lookup("x"), Some(1));
        let c = VarEnv::from_pairs(&[("y", 5)]).concat(&e);
        assert_eq!(c.iter().map(|(_, l)| l).collect::<Vec<_>>(), vec![5, 1, 2]);
    }

    #[test]
    fn aliasing_detects_shared_location() {
        let a = VarEnv::from_pairs(&[("x", 1)]);
        let b = VarEnv::from_pairs(&[("y", 1)]);
        assert!(!aliasing_free([&a, &b]));
        let c = VarEnv::from_pairs(&[("x", 1), ("x", 2)]);
        assert!(aliasing_free([&a, &c]));
    }

    #[test]
    fn core_text() {
        assert_eq!(core_str(&gh()), "letrec g(x) = (letrec h() = x in h()) in g(1)");
    }
}
