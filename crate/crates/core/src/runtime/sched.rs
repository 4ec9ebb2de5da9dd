//! Scheduling decisions shared by the cps runtime and the reference
//! runner: ready queue, timers, condition variables, readiness waiters and
//! the virtual clock. The payload `T` is whatever the caller needs to resume
//! a thread (a continuation, or nothing at all).
//!
//! Virtual time only advances when no thread is ready. Script events due at
//! the current tick are delivered every time the loop picks a thread.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::fmt;

use crate::lang::{Primitive, Value, IO_IN, IO_OUT, SCHED_LOOP, SCHED_POOL};

pub type Tid = u64;

/// Result of `io_wait` on a key the event source does not know.
pub const IO_BADKEY: i64 = -2;
/// Result of `io_wait` when woken by its condition variable.
pub const IO_SIGNALLED: i64 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dir {
    In,
    Out,
}

impl Dir {
    pub fn from_int(n: i64) -> Option<Dir> {
        match n {
            IO_IN => Some(Dir::In),
            IO_OUT => Some(Dir::Out),
            _ => None,
        }
    }

    pub fn as_int(self) -> i64 {
        match self {
            Dir::In => IO_IN,
            Dir::Out => IO_OUT,
        }
    }
}

impl fmt::Display for Dir {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dir::In => "in",
            Dir::Out => "out",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScriptEvent {
    pub tick: u64,
    pub key: i64,
    pub dir: Dir,
}

/// Virtual event source: readiness events at fixed ticks.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Script {
    pub events: Vec<ScriptEvent>,
}

impl Script {
    /// Lines of the form `at <tick> ready <key> <in|out>`; `#` starts a
    /// comment.
    pub fn parse(text: &str) -> Result<Script, String> {
        let mut events = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let w: Vec<&str> = line.split_whitespace().collect();
            let bad = || format!("line {}: expected `at <tick> ready <key> <in|out>`", i + 1);
            if w.len() != 5 || w[0] != "at" || w[2] != "ready" {
                return Err(bad());
            }
            let tick = w[1].parse().map_err(|_| bad())?;
            let key = w[3].parse().map_err(|_| bad())?;
            let dir = match w[4] {
                "in" => Dir::In,
                "out" => Dir::Out,
                _ => return Err(bad()),
            };
            events.push(ScriptEvent { tick, key, dir });
        }
        events.sort_by_key(|e| e.tick);
        Ok(Script { events })
    }

    pub fn keys(&self) -> BTreeSet<i64> {
        self.events.iter().map(|e| e.key).collect()
    }
}

/// Why a thread gives control back.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Request {
    Yield,
    Sleep(i64, Option<i64>),
    IoWait(i64, Dir, Option<i64>),
    Wait(i64),
}

/// A decoded call to one of the five primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimCall {
    Suspend(Request),
    Link(i64),
}

fn int_arg(p: Primitive, v: Value) -> Result<i64, String> {
    v.as_int().ok_or_else(|| format!("{}: expected an integer, got {v}", p.name()))
}

/// Check the arguments of a primitive call and turn them into a request.
pub fn decode_primitive(p: Primitive, args: &[Value]) -> Result<PrimCall, String> {
    let n = args
        .iter()
        .map(|v| int_arg(p, *v))
        .collect::<Result<Vec<i64>, String>>()?;
    Ok(match (p, n.as_slice()) {
        (Primitive::Yield, []) => PrimCall::Suspend(Request::Yield),
        (Primitive::Sleep, [t]) => PrimCall::Suspend(Request::Sleep(*t, None)),
        (Primitive::Sleep, [t, c]) => PrimCall::Suspend(Request::Sleep(*t, Some(*c))),
        (Primitive::IoWait, [k, d, rest @ ..]) if rest.len() <= 1 => {
            let dir = Dir::from_int(*d).ok_or_else(|| format!("io_wait: bad direction {d}"))?;
            PrimCall::Suspend(Request::IoWait(*k, dir, rest.first().copied()))
        }
        (Primitive::Wait, [c]) => PrimCall::Suspend(Request::Wait(*c)),
        (Primitive::Link, [s]) if *s == SCHED_LOOP || *s == SCHED_POOL => PrimCall::Link(*s),
        (Primitive::Link, [s]) => return Err(format!("link: no scheduler {s}")),
        _ => return Err(format!("{}: wrong number of arguments", p.name())),
    })
}

/// What a thread running in the worker pool gets back from a primitive:
/// `Ok(Some(v))` continues in the pool, `Ok(None)` means the thread goes
/// back to the loop and resumes there with `SCHED_POOL`.
pub fn pool_primitive(call: PrimCall) -> Result<Option<Value>, String> {
    match call {
        PrimCall::Suspend(Request::Yield) => Ok(Some(Value::Unit)),
        PrimCall::Suspend(Request::Sleep(..)) => Ok(Some(Value::Int(0))),
        PrimCall::Suspend(r) => Err(format!("{r:?} is not allowed in detached mode")),
        PrimCall::Link(SCHED_POOL) => Ok(Some(Value::Int(SCHED_POOL))),
        PrimCall::Link(_) => Ok(None),
    }
}

#[derive(Clone, Debug)]
enum Parked {
    Sleep { until: u64, cond: Option<i64> },
    Io { key: i64, dir: Dir, cond: Option<i64> },
    Cond(i64),
}

impl fmt::Display for Parked {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Parked::Sleep { until, cond } => {
                write!(f, "sleeping until {until}")?;
                if let Some(c) = cond {
                    write!(f, " or cond {c}")?;
                }
                Ok(())
            }
            Parked::Io { key, dir, cond } => {
                write!(f, "waiting for {key} {dir}")?;
                if let Some(c) = cond {
                    write!(f, " or cond {c}")?;
                }
                Ok(())
            }
            Parked::Cond(c) => write!(f, "waiting on cond {c}"),
        }
    }
}

pub enum Next<T> {
    Run(Tid, T, Value),
    /// Nothing is runnable here but detached threads may come back.
    WaitPool,
    Done,
    Deadlock(Vec<String>),
}

pub struct Scheduler<T> {
    now: u64,
    ready: VecDeque<(Tid, T, Value)>,
    parked: BTreeMap<Tid, (u64, T, Parked)>,
    timers: BinaryHeap<Reverse<(u64, u64, Tid)>>,
    conds: BTreeMap<i64, VecDeque<(Tid, u64)>>,
    io: BTreeMap<(i64, Dir), VecDeque<(Tid, u64)>>,
    tokens: BTreeMap<(i64, Dir), u64>,
    known_keys: BTreeSet<i64>,
    script: VecDeque<ScriptEvent>,
    accepted: BTreeMap<i64, i64>,
    next_tid: Tid,
    next_cond: i64,
    seq: u64,
    detached: usize,
    pub trace: Option<Vec<String>>,
}

impl<T> Scheduler<T> {
    pub fn new(script: &Script) -> Self {
        Scheduler {
            now: 0,
            ready: VecDeque::new(),
            parked: BTreeMap::new(),
            timers: BinaryHeap::new(),
            conds: BTreeMap::new(),
            io: BTreeMap::new(),
            tokens: BTreeMap::new(),
            known_keys: script.keys(),
            script: script.events.iter().cloned().collect(),
            accepted: BTreeMap::new(),
            next_tid: 0,
            next_cond: 1,
            seq: 0,
            detached: 0,
            trace: None,
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    fn log(&mut self, msg: impl FnOnce() -> String) {
        if let Some(t) = &mut self.trace {
            t.push(format!("[{}] {}", self.now, msg()));
        }
    }

    pub fn spawn(&mut self, payload: T) -> Tid {
        let tid = self.next_tid;
        self.next_tid += 1;
        self.log(|| format!("spawn {tid}"));
        self.ready.push_back((tid, payload, Value::Unit));
        tid
    }

    /// A thread finished; only recorded in the trace.
    pub fn exit(&mut self, tid: Tid, v: Value) {
        self.log(|| format!("exit {tid} with {v}"));
    }

    pub fn thread_count(&self) -> usize {
        self.ready.len() + self.parked.len() + self.detached
    }

    pub fn cond_new(&mut self) -> i64 {
        let c = self.next_cond;
        self.next_cond += 1;
        c
    }

    /// Take the next pending connection on a listening key. Connection
    /// keys are `key * 100 + n` for the n-th accepted connection.
    pub fn accept(&mut self, key: i64) -> i64 {
        let n = self.accepted.entry(key).or_insert(0);
        *n += 1;
        let conn = key * 100 + *n;
        self.known_keys.insert(conn);
        self.log(|| format!("accept {key} -> {conn}"));
        conn
    }

    fn park(&mut self, tid: Tid, payload: T, p: Parked) {
        self.seq += 1;
        let seq = self.seq;
        match &p {
            Parked::Sleep { until, cond } => {
                self.timers.push(Reverse((*until, seq, tid)));
                if let Some(c) = cond {
                    self.conds.entry(*c).or_default().push_back((tid, seq));
                }
            }
            Parked::Io { key, dir, cond } => {
                self.io.entry((*key, *dir)).or_default().push_back((tid, seq));
                if let Some(c) = cond {
                    self.conds.entry(*c).or_default().push_back((tid, seq));
                }
            }
            Parked::Cond(c) => self.conds.entry(*c).or_default().push_back((tid, seq)),
        }
        self.log(|| format!("park {tid} {p}"));
        self.parked.insert(tid, (seq, payload, p));
    }

    /// Hand a running thread back to the scheduler.
    pub fn suspend(&mut self, tid: Tid, payload: T, req: Request) {
        match req {
            Request::Yield => {
                self.log(|| format!("yield {tid}"));
                self.ready.push_back((tid, payload, Value::Unit));
            }
            Request::Sleep(ticks, cond) => {
                let until = self.now + ticks.max(0) as u64;
                self.park(tid, payload, Parked::Sleep { until, cond });
            }
            Request::IoWait(key, dir, cond) => {
                if !self.known_keys.contains(&key) {
                    self.log(|| format!("io_wait {tid} on unknown key {key}"));
                    self.ready.push_back((tid, payload, Value::Int(IO_BADKEY)));
                } else if let Some(n) = self.tokens.get_mut(&(key, dir)).filter(|n| **n > 0) {
                    *n -= 1;
                    self.log(|| format!("io_wait {tid} {key} {dir} already ready"));
                    self.ready.push_back((tid, payload, Value::Int(dir.as_int())));
                } else {
                    self.park(tid, payload, Parked::Io { key, dir, cond });
                }
            }
            Request::Wait(c) => self.park(tid, payload, Parked::Cond(c)),
        }
    }

    fn wake(&mut self, tid: Tid, v: Value) {
        let Some((seq, payload, p)) = self.parked.remove(&tid) else {
            return;
        };
        match p {
            Parked::Sleep { cond: Some(c), .. } | Parked::Io { cond: Some(c), .. } | Parked::Cond(c) => {
                if let Some(q) = self.conds.get_mut(&c) {
                    q.retain(|e| *e != (tid, seq));
                }
            }
            _ => {}
        }
        if let Parked::Io { key, dir, .. } = p {
            if let Some(q) = self.io.get_mut(&(key, dir)) {
                q.retain(|e| *e != (tid, seq));
            }
        }
        self.log(|| format!("wake {tid} with {v}"));
        self.ready.push_back((tid, payload, v));
    }

    fn live(&self, tid: Tid, seq: u64) -> bool {
        matches!(self.parked.get(&tid), Some((s, _, _)) if *s == seq)
    }

    /// Wake the longest waiting thread on `c`, if any.
    pub fn signal(&mut self, c: i64) {
        self.log(|| format!("signal {c}"));
        while let Some((tid, seq)) = self.conds.get_mut(&c).and_then(|q| q.pop_front()) {
            if self.live(tid, seq) {
                let v = self.signal_value(tid);
                self.wake(tid, v);
                return;
            }
        }
    }

    pub fn signal_all(&mut self, c: i64) {
        self.log(|| format!("signal_all {c}"));
        let waiters: Vec<_> = self.conds.remove(&c).map(Vec::from).unwrap_or_default();
        for (tid, seq) in waiters {
            if self.live(tid, seq) {
                let v = self.signal_value(tid);
                self.wake(tid, v);
            }
        }
    }

    fn signal_value(&self, tid: Tid) -> Value {
        match self.parked.get(&tid).map(|(_, _, p)| p) {
            Some(Parked::Sleep { .. }) => Value::Int(1),
            Some(Parked::Io { .. }) => Value::Int(IO_SIGNALLED),
            _ => Value::Unit,
        }
    }

    /// A thread left for the worker pool.
    pub fn detach(&mut self, tid: Tid) {
        self.log(|| format!("detach {tid}"));
        self.detached += 1;
    }

    /// A detached thread came back to the loop.
    pub fn reattach(&mut self, tid: Tid, payload: T, v: Value) {
        self.log(|| format!("attach {tid}"));
        self.detached -= 1;
        self.ready.push_back((tid, payload, v));
    }

    /// A detached thread finished in the pool.
    pub fn detached_exit(&mut self, tid: Tid) {
        self.log(|| format!("exit {tid} in pool"));
        self.detached -= 1;
    }

    fn deliver_due(&mut self) {
        while let Some(e) = self.script.front().filter(|e| e.tick <= self.now).cloned() {
            self.script.pop_front();
            self.log(|| format!("ready {} {}", e.key, e.dir));
            let waiter = loop {
                match self.io.get_mut(&(e.key, e.dir)).and_then(|q| q.pop_front()) {
                    Some((tid, seq)) if self.live(tid, seq) => break Some(tid),
                    Some(_) => continue,
                    None => break None,
                }
            };
            match waiter {
                Some(tid) => self.wake(tid, Value::Int(e.dir.as_int())),
                None => *self.tokens.entry((e.key, e.dir)).or_insert(0) += 1,
            }
        }
    }

    fn fire_timers(&mut self) {
        while let Some(Reverse((until, seq, tid))) = self.timers.peek().copied() {
            if until > self.now {
                break;
            }
            self.timers.pop();
            if self.live(tid, seq) {
                self.wake(tid, Value::Int(0));
            }
        }
    }

    fn next_deadline(&mut self) -> Option<u64> {
        while let Some(Reverse((_, seq, tid))) = self.timers.peek().copied() {
            if self.live(tid, seq) {
                break;
            }
            self.timers.pop();
        }
        let t = self.timers.peek().map(|Reverse((u, _, _))| *u);
        let s = self.script.front().map(|e| e.tick);
        match (t, s) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    pub fn next(&mut self) -> Next<T> {
        loop {
            self.deliver_due();
            if let Some((tid, payload, v)) = self.ready.pop_front() {
                self.log(|| format!("run {tid}"));
                return Next::Run(tid, payload, v);
            }
            if self.detached > 0 {
                return Next::WaitPool;
            }
            match self.next_deadline() {
                Some(t) => {
                    self.now = self.now.max(t);
                    self.fire_timers();
                }
                None if self.parked.is_empty() => return Next::Done,
                None => {
                    let states = self
                        .parked
                        .iter()
                        .map(|(tid, (_, _, p))| format!("thread {tid} {p}"))
                        .collect();
                    return Next::Deadlock(states);
                }
            }
        }
    }
}
