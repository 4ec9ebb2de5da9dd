//! Lowered form of a cps program: variables resolved to frame slots or
//! global indices, calls resolved to table ids. Also the evaluator that
//! runs one frame.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use thiserror::Error;

use super::cont::Continuation;
use crate::cps::{Block, CpsProgram, Entry, Fid, Push, Slot, Terminator};
use crate::lang::{Builtin, FunDecl, Name, Primitive, Term, TermKind, Value};
use crate::semantics::truthy;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum LowerError {
    #[error("{fun}: unbound variable {var}")]
    Unbound { fun: Name, var: Name },
    #[error("{fun}: unknown function {callee}")]
    UnknownFunction { fun: Name, callee: Name },
    #[error("{fun}: {callee} expects {expected} arguments, got {got}")]
    Arity { fun: Name, callee: Name, expected: usize, got: usize },
    #[error("{fun}: {what} is not supported by the runtime")]
    Unsupported { fun: Name, what: String },
    #[error("entry point {0} is not a cps function")]
    BadEntry(Name),
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum RtError {
    #[error("{0}")]
    Stuck(String),
    #[error("native recursion deeper than {0}")]
    TooDeep(usize),
}

fn stuck<T>(msg: String) -> Result<T, RtError> {
    Err(RtError::Stuck(msg))
}

#[derive(Clone, Debug)]
pub(crate) enum Expr {
    Const(Value),
    Local(u16),
    Global(u32),
    SetLocal(u16, Box<Expr>),
    SetGlobal(u32, Box<Expr>),
    Seq(Box<[Expr]>),
    If(Box<[Expr; 3]>),
    While(Box<[Expr; 2]>),
    Break,
    Return(Box<Expr>),
    Pure(Builtin, Box<[Expr]>),
    Call(u32, Box<[Expr]>),
    AddrGlobal(u32),
    Deref(Box<Expr>),
    SetRef(Box<[Expr; 2]>),
    Alloc,
    Free(Box<Expr>),
    Effect(Builtin, Box<[Expr]>),
    Spawn(Fid, Box<[Expr]>),
}

#[derive(Clone, Debug)]
pub(crate) struct PushCode {
    pub fid: Fid,
    pub args: Box<[Expr]>,
    pub hole: Option<usize>,
}

#[derive(Clone, Debug)]
pub(crate) enum TermCode {
    Invoke(Expr),
    Push1(PushCode),
    Push2(PushCode, PushCode),
    Branch(Expr, Box<BlockCode>, Box<BlockCode>),
}

#[derive(Clone, Debug)]
pub(crate) struct BlockCode {
    pub stmts: Box<[Expr]>,
    pub term: TermCode,
}

#[derive(Clone, Debug)]
pub(crate) struct FunCode {
    pub nslots: usize,
    pub body: BlockCode,
}

#[derive(Clone, Debug)]
pub(crate) struct NativeCode {
    pub nparams: usize,
    pub nslots: usize,
    pub body: Expr,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Target {
    Fun(usize),
    Prim(Primitive),
}

/// A cps program ready to run.
#[derive(Clone, Debug)]
pub struct Code {
    pub(crate) targets: Vec<(Name, Option<usize>, Target)>,
    pub(crate) funs: Vec<FunCode>,
    pub(crate) natives: Vec<NativeCode>,
    pub(crate) globals: Vec<Value>,
    pub entry: Fid,
    pub entry_arity: usize,
}

impl Code {
    pub fn fid(&self, name: &str) -> Option<Fid> {
        self.targets.iter().position(|(n, _, _)| &**n == name).map(|i| i as Fid)
    }

    pub fn name(&self, fid: Fid) -> &str {
        &self.targets[fid as usize].0
    }

    pub fn arity(&self, fid: Fid) -> Option<usize> {
        self.targets[fid as usize].1
    }
}

struct Lowerer<'a> {
    fun: Name,
    slots: BTreeMap<Name, u16>,
    globals: &'a BTreeMap<Name, u32>,
    natives: &'a BTreeMap<Name, (u32, usize)>,
    fids: &'a BTreeMap<Name, (Fid, Option<usize>)>,
}

impl Lowerer<'_> {
    fn unsupported<T>(&self, what: &str) -> Result<T, LowerError> {
        Err(LowerError::Unsupported {
            fun: self.fun.clone(),
            what: what.to_string(),
        })
    }

    fn all(&self, ts: &[Term]) -> Result<Box<[Expr]>, LowerError> {
        ts.iter().map(|t| self.expr(t)).collect()
    }

    fn var(&self, x: &Name) -> Result<Result<u16, u32>, LowerError> {
        if let Some(s) = self.slots.get(x) {
            Ok(Ok(*s))
        } else if let Some(g) = self.globals.get(x) {
            Ok(Err(*g))
        } else {
            Err(LowerError::Unbound {
                fun: self.fun.clone(),
                var: x.clone(),
            })
        }
    }

    fn expr(&self, t: &Term) -> Result<Expr, LowerError> {
        use TermKind::*;
        Ok(match &t.kind {
            Const(v) => Expr::Const(*v),
            Var(x) => match self.var(x)? {
                Ok(s) => Expr::Local(s),
                Err(g) => Expr::Global(g),
            },
            Assign(x, e) => {
                let e = Box::new(self.expr(e)?);
                match self.var(x)? {
                    Ok(s) => Expr::SetLocal(s, e),
                    Err(g) => Expr::SetGlobal(g, e),
                }
            }
            Seq(..) => {
                let items: Vec<Term> = t.seq_items().into_iter().cloned().collect();
                Expr::Seq(self.all(&items)?)
            }
            If(c, a, b) => Expr::If(Box::new([self.expr(c)?, self.expr(a)?, self.expr(b)?])),
            While(c, b) => Expr::While(Box::new([self.expr(c)?, self.expr(b)?])),
            Break => Expr::Break,
            Return(e) => Expr::Return(Box::new(self.expr(e)?)),
            Call(g, args) => {
                let Some(&(i, arity)) = self.natives.get(g) else {
                    return Err(LowerError::UnknownFunction {
                        fun: self.fun.clone(),
                        callee: g.clone(),
                    });
                };
                self.check_arity(g, arity, args.len())?;
                Expr::Call(i, self.all(args)?)
            }
            NativeCall(b, args) => {
                let a = self.all(args)?;
                match b {
                    _ if b.is_pure() => Expr::Pure(b.clone(), a),
                    Builtin::Alloc => Expr::Alloc,
                    Builtin::Free => match Vec::from(a).pop() {
                        Some(r) if args.len() == 1 => Expr::Free(Box::new(r)),
                        _ => return self.unsupported("free without exactly one argument"),
                    },
                    Builtin::Spawn(f) => {
                        let Some(&(fid, arity)) = self.fids.get(f) else {
                            return Err(LowerError::UnknownFunction {
                                fun: self.fun.clone(),
                                callee: f.clone(),
                            });
                        };
                        let Some(n) = arity else {
                            return self.unsupported(&format!("spawn of primitive {f}"));
                        };
                        self.check_arity(f, n, args.len())?;
                        Expr::Spawn(fid, a)
                    }
                    _ => Expr::Effect(b.clone(), a),
                }
            }
            AddrOf(x) => match self.var(x)? {
                Err(g) => Expr::AddrGlobal(g),
                Ok(_) => return self.unsupported(&format!("address of local {x}")),
            },
            Deref(p) => Expr::Deref(Box::new(self.expr(p)?)),
            SetRef(p, e) => Expr::SetRef(Box::new([self.expr(p)?, self.expr(e)?])),
            LetRec(..) => return self.unsupported("inner function"),
            Goto(_) | Labelled(..) => return self.unsupported("goto"),
        })
    }

    fn check_arity(&self, g: &Name, expected: usize, got: usize) -> Result<(), LowerError> {
        if expected == got {
            Ok(())
        } else {
            Err(LowerError::Arity {
                fun: self.fun.clone(),
                callee: g.clone(),
                expected,
                got,
            })
        }
    }

    fn push(&self, p: &Push) -> Result<PushCode, LowerError> {
        if let Some(n) = self.fids.get(&p.target).and_then(|e| e.1) {
            self.check_arity(&p.target, n, p.args.len())?;
        }
        if let Some(prim) = Primitive::from_name(&p.target) {
            if !prim.arities().contains(&p.args.len()) {
                return Err(LowerError::Arity {
                    fun: self.fun.clone(),
                    callee: p.target.clone(),
                    expected: prim.arities()[0],
                    got: p.args.len(),
                });
            }
        }
        let mut hole = None;
        let mut args = Vec::with_capacity(p.args.len());
        for (i, s) in p.args.iter().enumerate() {
            match s {
                Slot::Arg(a) => args.push(self.expr(a)?),
                Slot::Hole => {
                    hole = Some(i);
                    args.push(Expr::Const(Value::Unit));
                }
            }
        }
        Ok(PushCode {
            fid: p.fid,
            args: args.into(),
            hole,
        })
    }

    fn block(&self, b: &Block) -> Result<BlockCode, LowerError> {
        let term = match &b.term {
            Terminator::InvokeValue(e) => TermCode::Invoke(self.expr(e)?),
            Terminator::PushInvoke(p) => TermCode::Push1(self.push(p)?),
            Terminator::PushPushInvoke { second, first } => TermCode::Push2(self.push(second)?, self.push(first)?),
            Terminator::Branch(c, x, y) => TermCode::Branch(self.expr(c)?, Box::new(self.block(x)?), Box::new(self.block(y)?)),
        };
        Ok(BlockCode {
            stmts: self.all(&b.stmts)?,
            term,
        })
    }
}

fn slot_map<'n>(names: impl Iterator<Item = &'n Name>) -> BTreeMap<Name, u16> {
    let mut m = BTreeMap::new();
    for (i, n) in names.enumerate() {
        m.entry(n.clone()).or_insert(i as u16);
    }
    m
}

/// Resolve names in a converted program.
pub fn lower(ir: &CpsProgram) -> Result<Code, LowerError> {
    let globals: BTreeMap<Name, u32> = ir.globals.iter().enumerate().map(|(i, g)| (g.name.clone(), i as u32)).collect();
    let natives: BTreeMap<Name, (u32, usize)> = ir
        .natives
        .iter()
        .enumerate()
        .map(|(i, f)| (f.name.clone(), (i as u32, f.params.len())))
        .collect();
    let fids: BTreeMap<Name, (Fid, Option<usize>)> = ir
        .table
        .entries
        .iter()
        .enumerate()
        .map(|(i, (n, a, _))| (n.clone(), (i as Fid, *a)))
        .collect();
    let lowerer = |fun: &Name, slots| Lowerer {
        fun: fun.clone(),
        slots,
        globals: &globals,
        natives: &natives,
        fids: &fids,
    };
    let mut native_code = Vec::new();
    for f in &ir.natives {
        native_code.push(lower_native(f, lowerer(&f.name, slot_map(f.param_names().chain(f.locals.iter().map(|l| &l.name)))))?);
    }
    let mut funs = Vec::new();
    for f in &ir.funs {
        let l = lowerer(&f.name, slot_map(f.params.iter().chain(&f.locals)));
        funs.push(FunCode {
            nslots: f.params.len() + f.locals.len(),
            body: l.block(&f.body)?,
        });
    }
    let targets = ir
        .table
        .entries
        .iter()
        .map(|(n, a, e)| {
            let t = match e {
                Entry::Fun(i) => Target::Fun(*i),
                Entry::Prim(p) => Target::Prim(*p),
            };
            (n.clone(), *a, t)
        })
        .collect();
    let entry = ir.table.fid(&ir.entry).ok_or_else(|| LowerError::BadEntry(ir.entry.clone()))?;
    let entry_arity = ir.table.get(entry).1.ok_or_else(|| LowerError::BadEntry(ir.entry.clone()))?;
    Ok(Code {
        targets,
        funs,
        natives: native_code,
        globals: ir.globals.iter().map(|g| g.init).collect(),
        entry,
        entry_arity,
    })
}

fn lower_native(f: &FunDecl, l: Lowerer<'_>) -> Result<NativeCode, LowerError> {
    Ok(NativeCode {
        nparams: f.params.len(),
        nslots: f.params.len() + f.locals.len(),
        body: l.expr(&f.body)?,
    })
}

/// Globals and heap cells. A reference to global `i` is `Ref(i + 1)`;
/// allocated cells are numbered after the globals.
#[derive(Debug, Default)]
pub struct Heap {
    pub(crate) globals: Vec<Value>,
    cells: HashMap<u64, Value>,
    next: u64,
}

impl Heap {
    pub fn new(globals: Vec<Value>) -> Self {
        let next = globals.len() as u64 + 1;
        Heap {
            globals,
            cells: HashMap::new(),
            next,
        }
    }

    pub fn live_cells(&self) -> usize {
        self.cells.len()
    }

    fn alloc(&mut self) -> Value {
        let id = self.next;
        self.next += 1;
        self.cells.insert(id, Value::Unit);
        Value::Ref(id)
    }

    fn cell(&mut self, r: Value) -> Result<&mut Value, RtError> {
        let Value::Ref(id) = r else {
            return stuck(format!("dereference of non-pointer {r}"));
        };
        let g = self.globals.len() as u64;
        if (1..=g).contains(&id) {
            return Ok(&mut self.globals[id as usize - 1]);
        }
        match self.cells.get_mut(&id) {
            Some(c) => Ok(c),
            None => stuck(format!("dangling pointer &{id}")),
        }
    }

    fn free(&mut self, r: Value) -> Result<(), RtError> {
        match r {
            Value::Ref(id) if self.cells.remove(&id).is_some() => Ok(()),
            _ => stuck(format!("free of {r}")),
        }
    }
}

/// Effects that need the scheduler or the output.
pub(crate) trait Effects {
    fn effect(&mut self, b: &Builtin, args: &[Value]) -> Result<Value, RtError>;
    fn spawn(&mut self, fid: Fid, args: &[Value]) -> Result<Value, RtError>;
}

pub(crate) enum Flow {
    Err(RtError),
    Break,
    Return(Value),
}

impl From<RtError> for Flow {
    fn from(e: RtError) -> Self {
        Flow::Err(e)
    }
}

/// Outcome of running one frame.
pub(crate) enum Step {
    /// Invoke the continuation with this value.
    Invoke(Value),
    /// A primitive frame was popped; its arguments are in the array.
    Prim(Primitive, [Value; 3], usize),
    /// The continuation was empty: the thread ends with this value.
    Done(Value),
}

const NATIVE_DEPTH: usize = 10_000;
const INLINE_SLOTS: usize = 8;

pub(crate) struct Eval<'a> {
    pub code: &'a Code,
    pub mem: &'a Mutex<Heap>,
    native_depth: usize,
    pub frame_depth: usize,
    pub max_frame_depth: usize,
    pub steps: u64,
    pub pushes: u64,
    args: Vec<Value>,
    scratch: Vec<Value>,
}

impl<'a> Eval<'a> {
    pub fn new(code: &'a Code, mem: &'a Mutex<Heap>) -> Self {
        Eval {
            code,
            mem,
            native_depth: 0,
            frame_depth: 0,
            max_frame_depth: 0,
            steps: 0,
            pushes: 0,
            args: Vec::with_capacity(16),
            scratch: Vec::with_capacity(16),
        }
    }

    fn heap(&self) -> std::sync::MutexGuard<'a, Heap> {
        // A poisoned heap means another worker panicked; its state is
        // still consistent at operation granularity.
        self.mem.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Pop the top frame of `k` and run it.
    pub fn step<E: Effects>(&mut self, k: &mut Continuation, v: Value, fx: &mut E) -> Result<Step, RtError> {
        let Some(top) = k.pop() else {
            return Ok(Step::Done(v));
        };
        self.steps += 1;
        let mut slots = std::mem::take(&mut self.args);
        k.take_args(&top, v, &mut slots);
        let r = match self.code.targets[top.fid as usize].2 {
            Target::Prim(p) => {
                let mut a = [Value::Unit; 3];
                let n = slots.len().min(3);
                a[..n].copy_from_slice(&slots[..n]);
                Ok(Step::Prim(p, a, n))
            }
            Target::Fun(i) => {
                let code = self.code;
                let f = &code.funs[i];
                slots.resize(f.nslots, Value::Unit);
                self.frame_depth += 1;
                self.max_frame_depth = self.max_frame_depth.max(self.frame_depth);
                let r = self.block(&f.body, &mut slots, k, fx);
                self.frame_depth -= 1;
                r
            }
        };
        self.args = slots;
        r
    }

    fn block<E: Effects>(&mut self, b: &BlockCode, slots: &mut [Value], k: &mut Continuation, fx: &mut E) -> Result<Step, RtError> {
        for s in b.stmts.iter() {
            match self.eval(s, slots, fx) {
                Ok(_) => {}
                Err(Flow::Return(v)) => return Ok(Step::Invoke(v)),
                Err(Flow::Break) => return stuck("break outside a loop".into()),
                Err(Flow::Err(e)) => return Err(e),
            }
        }
        match &b.term {
            TermCode::Invoke(e) => Ok(Step::Invoke(self.expr(e, slots, fx)?)),
            TermCode::Push1(p) => {
                self.push(p, slots, k, fx)?;
                Ok(Step::Invoke(Value::Unit))
            }
            TermCode::Push2(second, first) => {
                // The arguments of the continuation frame are evaluated now,
                // before the first call runs.
                self.push(second, slots, k, fx)?;
                self.push(first, slots, k, fx)?;
                Ok(Step::Invoke(Value::Unit))
            }
            TermCode::Branch(c, x, y) => {
                let cv = self.expr(c, slots, fx)?;
                match truthy(cv) {
                    Some(true) => self.block(x, slots, k, fx),
                    Some(false) => self.block(y, slots, k, fx),
                    None => stuck(format!("condition is {cv}")),
                }
            }
        }
    }

    fn push<E: Effects>(&mut self, p: &PushCode, slots: &mut [Value], k: &mut Continuation, fx: &mut E) -> Result<(), RtError> {
        let mut vals = std::mem::take(&mut self.scratch);
        vals.clear();
        for a in p.args.iter() {
            match self.expr(a, slots, fx) {
                Ok(v) => vals.push(v),
                Err(e) => {
                    self.scratch = vals;
                    return Err(e);
                }
            }
        }
        k.push(p.fid, &vals, p.hole);
        self.pushes += 1;
        self.scratch = vals;
        Ok(())
    }

    /// Evaluate an expression that must not exit non-locally.
    fn expr<E: Effects>(&mut self, e: &Expr, slots: &mut [Value], fx: &mut E) -> Result<Value, RtError> {
        match self.eval(e, slots, fx) {
            Ok(v) => Ok(v),
            Err(Flow::Err(e)) => Err(e),
            Err(Flow::Break) => stuck("break outside a loop".into()),
            Err(Flow::Return(_)) => stuck("return inside an expression".into()),
        }
    }

    fn values<E: Effects>(&mut self, es: &[Expr], slots: &mut [Value], fx: &mut E) -> Result<Vec<Value>, Flow> {
        let mut out = Vec::with_capacity(es.len());
        for e in es {
            out.push(self.eval(e, slots, fx)?);
        }
        Ok(out)
    }

    fn eval<E: Effects>(&mut self, e: &Expr, slots: &mut [Value], fx: &mut E) -> Result<Value, Flow> {
        Ok(match e {
            Expr::Const(v) => *v,
            Expr::Local(i) => slots[*i as usize],
            Expr::Global(g) => self.heap().globals[*g as usize],
            Expr::SetLocal(i, e) => {
                slots[*i as usize] = self.eval(e, slots, fx)?;
                Value::Unit
            }
            Expr::SetGlobal(g, e) => {
                let v = self.eval(e, slots, fx)?;
                self.heap().globals[*g as usize] = v;
                Value::Unit
            }
            Expr::Seq(items) => {
                let mut last = Value::Unit;
                for it in items.iter() {
                    last = self.eval(it, slots, fx)?;
                }
                last
            }
            Expr::If(p) => {
                let cv = self.eval(&p[0], slots, fx)?;
                match truthy(cv) {
                    Some(true) => self.eval(&p[1], slots, fx)?,
                    Some(false) => self.eval(&p[2], slots, fx)?,
                    None => return Err(RtError::Stuck(format!("condition is {cv}")).into()),
                }
            }
            Expr::While(p) => loop {
                let cv = self.eval(&p[0], slots, fx)?;
                match truthy(cv) {
                    Some(true) => {}
                    Some(false) => break Value::Unit,
                    None => return Err(RtError::Stuck(format!("condition is {cv}")).into()),
                }
                match self.eval(&p[1], slots, fx) {
                    Ok(_) => {}
                    Err(Flow::Break) => break Value::Unit,
                    Err(e) => return Err(e),
                }
            },
            Expr::Break => return Err(Flow::Break),
            Expr::Return(e) => {
                let v = self.eval(e, slots, fx)?;
                return Err(Flow::Return(v));
            }
            Expr::Pure(b, args) => {
                let r = match &**args {
                    [a] => {
                        let a = self.eval(a, slots, fx)?;
                        b.eval_pure(&[a])
                    }
                    [a, c] => {
                        let a = self.eval(a, slots, fx)?;
                        let c = self.eval(c, slots, fx)?;
                        b.eval_pure(&[a, c])
                    }
                    _ => {
                        let vs = self.values(args, slots, fx)?;
                        b.eval_pure(&vs)
                    }
                };
                match r {
                    Some(v) => v,
                    None => return Err(RtError::Stuck(format!("{b:?} on ill-typed operands")).into()),
                }
            }
            Expr::Call(i, args) => self.call(*i as usize, args, slots, fx)?,
            Expr::AddrGlobal(g) => Value::Ref(*g as u64 + 1),
            Expr::Deref(p) => {
                let r = self.eval(p, slots, fx)?;
                *self.heap().cell(r)?
            }
            Expr::SetRef(p) => {
                let r = self.eval(&p[0], slots, fx)?;
                let v = self.eval(&p[1], slots, fx)?;
                *self.heap().cell(r)? = v;
                Value::Unit
            }
            Expr::Alloc => self.heap().alloc(),
            Expr::Free(p) => {
                let r = self.eval(p, slots, fx)?;
                self.heap().free(r)?;
                Value::Unit
            }
            Expr::Effect(b, args) => {
                let vs = self.values(args, slots, fx)?;
                fx.effect(b, &vs)?
            }
            Expr::Spawn(fid, args) => {
                let vs = self.values(args, slots, fx)?;
                fx.spawn(*fid, &vs)?
            }
        })
    }

    fn call<E: Effects>(&mut self, i: usize, args: &[Expr], slots: &mut [Value], fx: &mut E) -> Result<Value, Flow> {
        let code = self.code;
        let f = &code.natives[i];
        if self.native_depth >= NATIVE_DEPTH {
            return Err(RtError::TooDeep(NATIVE_DEPTH).into());
        }
        let mut inline = [Value::Unit; INLINE_SLOTS];
        let mut heap_slots;
        let callee: &mut [Value] = if f.nslots <= INLINE_SLOTS {
            &mut inline[..f.nslots]
        } else {
            heap_slots = vec![Value::Unit; f.nslots];
            &mut heap_slots
        };
        for (j, a) in args.iter().enumerate().take(f.nparams) {
            callee[j] = self.eval(a, slots, fx)?;
        }
        self.native_depth += 1;
        let r = self.eval(&f.body, callee, fx);
        self.native_depth -= 1;
        match r {
            Ok(v) | Err(Flow::Return(v)) => Ok(v),
            Err(Flow::Break) => Err(RtError::Stuck("break outside a loop".into()).into()),
            Err(e) => Err(e),
        }
    }
}
