//! Whole-program reference runner: the naive interpreter on source
//! programs, with threads.
//!
//! Each green thread is a recursive evaluation on its own host thread.
//! Only the thread holding the baton runs; a primitive call hands the
//! baton back to the coordinator, which asks the same scheduler the
//! runtime uses who runs next. Scheduling decisions therefore depend only
//! on the sequence of requests, and outputs can be compared line for line
//! with the compiled program.
//!
//! Detached mode is a flag: while it is set, yield and sleep return at
//! once and the thread keeps the baton.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::thread;

use super::{EvalError, Effect, FunEnv, Host, Loc, Memory, Naive, VarEnv};
use crate::lang::{Builtin, Name, Program, Term, Value, SCHED_LOOP, SCHED_POOL};
use crate::runtime::{
    decode_primitive, pool_primitive, scheduler_effect, ExitReport, ExitStatus, Next, PrimCall, RunOptions, RunStats,
    Scheduler, Tid,
};

/// Fuel per thread when the options give none.
pub const DEFAULT_THREAD_FUEL: u64 = 50_000_000;

const STACK: usize = 256 << 20;

struct World {
    sched: Scheduler<()>,
    memory: Memory,
    output: Vec<String>,
    running: Option<Tid>,
    resume: BTreeMap<Tid, Value>,
    spawns: Vec<(Tid, Name, Vec<Value>)>,
    failure: Option<ExitStatus>,
    abort: bool,
    result: Option<Value>,
    steps: u64,
}

struct Baton<'w> {
    world: &'w Mutex<World>,
    cv: &'w Condvar,
}

impl<'w> Baton<'w> {
    fn lock(&self) -> MutexGuard<'w, World> {
        self.world.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Give the baton away and wait until `tid` is scheduled again.
    fn wait_turn(&self, g: MutexGuard<'w, World>, tid: Tid) -> MutexGuard<'w, World> {
        self.cv
            .wait_while(g, |w| w.running != Some(tid) && !w.abort)
            .unwrap_or_else(|e| e.into_inner())
    }
}

struct ThreadHost<'w> {
    baton: &'w Baton<'w>,
    guard: Option<MutexGuard<'w, World>>,
    tid: Tid,
    detached: bool,
}

impl ThreadHost<'_> {
    fn world(&mut self) -> &mut World {
        self.guard.as_mut().expect("thread holds the baton")
    }

    fn suspend(&mut self) -> Result<Value, EvalError> {
        let tid = self.tid;
        let w = self.world();
        w.running = None;
        self.baton.cv.notify_all();
        let g = self.guard.take().expect("thread holds the baton");
        let mut g = self.baton.wait_turn(g, tid);
        if g.abort {
            self.guard = Some(g);
            return Err(EvalError::Stuck("aborted".into()));
        }
        let v = g.resume.remove(&tid).unwrap_or(Value::Unit);
        self.guard = Some(g);
        Ok(v)
    }
}

impl Host for ThreadHost<'_> {
    fn mem(&mut self) -> &mut Memory {
        &mut self.world().memory
    }

    fn effect(&mut self, e: Effect<'_>) -> Result<Value, EvalError> {
        let tid = self.tid;
        match e {
            Effect::Print(line) => {
                self.world().output.push(line);
                Ok(Value::Unit)
            }
            Effect::Native(Builtin::Spawn(f), args) => {
                let w = self.world();
                let t = w.sched.spawn(());
                w.spawns.push((t, f.clone(), args.to_vec()));
                Ok(Value::Int(t as i64))
            }
            Effect::Native(b, args) => {
                let w = self.world();
                scheduler_effect(&mut w.sched, &mut w.output, b, args).map_err(EvalError::Stuck)
            }
            Effect::Primitive(p, args) => {
                let call = decode_primitive(p, args).map_err(EvalError::Stuck)?;
                if self.detached {
                    return match pool_primitive(call).map_err(EvalError::Stuck)? {
                        Some(v) => Ok(v),
                        None => {
                            self.detached = false;
                            self.world().sched.reattach(tid, (), Value::Int(SCHED_POOL));
                            self.suspend()
                        }
                    };
                }
                match call {
                    PrimCall::Suspend(r) => {
                        self.world().sched.suspend(tid, (), r);
                        self.suspend()
                    }
                    PrimCall::Link(SCHED_LOOP) => Ok(Value::Int(SCHED_LOOP)),
                    PrimCall::Link(_) => {
                        self.detached = true;
                        self.world().sched.detach(tid);
                        Ok(Value::Int(SCHED_LOOP))
                    }
                }
            }
        }
    }
}

fn green_thread(
    p: &Program,
    globals: &[(Name, Loc)],
    baton: &Baton<'_>,
    fuel: u64,
    tid: Tid,
    f: Name,
    args: Vec<Value>,
) {
    let g = baton.wait_turn(baton.lock(), tid);
    if g.abort {
        return;
    }
    let mut host = ThreadHost {
        baton,
        guard: Some(g),
        tid,
        detached: false,
    };
    host.world().resume.remove(&tid);
    let mut env = VarEnv::empty();
    for (n, l) in globals.iter().rev() {
        env = env.bind(n.clone(), *l);
    }
    let fenv = FunEnv::empty().group(&p.funs, env.clone());
    let call = Term::call_n(f, args.into_iter().map(Term::val).collect());
    let mut ev = Naive::new(host, fuel);
    let r = ev.eval(&call, &env, &fenv);
    let steps = ev.steps;
    let mut host = ev.host;
    let detached = host.detached;
    let w = host.world();
    w.steps += steps;
    if !w.abort {
        match r {
            Ok(v) => {
                if detached {
                    w.sched.detached_exit(tid);
                }
                w.sched.exit(tid, v);
                if tid == 0 {
                    w.result = Some(v);
                }
            }
            Err(EvalError::OutOfFuel) => {
                w.failure = Some(ExitStatus::FuelExhausted);
                w.abort = true;
            }
            Err(e) => {
                w.failure = Some(ExitStatus::Error(format!("thread {tid}: {e}")));
                w.abort = true;
            }
        }
    }
    w.running = None;
    baton.cv.notify_all();
}

/// Run `p` from its entry point under the naive rules. `opts.fuel` bounds
/// each thread's rule applications.
pub fn run_reference(p: &Program, opts: &RunOptions) -> ExitReport {
    let mut memory = Memory::default();
    let mut globals = Vec::new();
    for g in &p.globals {
        let l = memory.fresh();
        memory.store.set(l, g.init);
        globals.push((g.name.clone(), l));
    }
    let mut sched = Scheduler::new(&opts.script);
    if opts.trace {
        sched.trace = Some(Vec::new());
    }
    let world = Mutex::new(World {
        sched,
        memory,
        output: Vec::new(),
        running: None,
        resume: BTreeMap::new(),
        spawns: Vec::new(),
        failure: None,
        abort: false,
        result: None,
        steps: 0,
    });
    let cv = Condvar::new();
    let baton = Baton { world: &world, cv: &cv };
    let fuel = opts.fuel.unwrap_or(DEFAULT_THREAD_FUEL);
    let mut stats = RunStats::default();

    let status = thread::scope(|scope| {
        let mut g = baton.lock();
        let tid = g.sched.spawn(());
        g.spawns.push((tid, p.entry.clone(), opts.args.clone()));
        let status = loop {
            let pending = std::mem::take(&mut g.spawns);
            for (tid, f, args) in pending {
                stats.threads += 1;
                let (globals, baton) = (&globals, &baton);
                let spawned = thread::Builder::new()
                    .stack_size(STACK)
                    .spawn_scoped(scope, move || green_thread(p, globals, baton, fuel, tid, f, args));
                if let Err(e) = spawned {
                    g.abort = true;
                    g.failure = Some(ExitStatus::Error(format!("cannot start thread: {e}")));
                }
            }
            if let Some(s) = g.failure.clone() {
                break s;
            }
            stats.peak_threads = stats.peak_threads.max(g.sched.thread_count());
            match g.sched.next() {
                Next::Run(tid, (), v) => {
                    stats.switches += 1;
                    g.resume.insert(tid, v);
                    g.running = Some(tid);
                    cv.notify_all();
                    g = cv.wait_while(g, |w| w.running.is_some()).unwrap_or_else(|e| e.into_inner());
                }
                Next::WaitPool => break ExitStatus::Error("detached thread lost".into()),
                Next::Done => break ExitStatus::Clean,
                Next::Deadlock(states) => break ExitStatus::Deadlock(states),
            }
        };
        g.abort = true;
        cv.notify_all();
        status
    });
    let mut w = world.into_inner().unwrap_or_else(|e| e.into_inner());
    stats.frames = w.steps;
    stats.virtual_time = w.sched.now();
    ExitReport {
        status,
        result: w.result,
        output: std::mem::take(&mut w.output),
        trace: w.sched.trace.take().unwrap_or_default(),
        stats,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse;

    fn run(src: &str, args: Vec<Value>) -> ExitReport {
        let p = parse(src).unwrap();
        run_reference(&p, &RunOptions { args, ..Default::default() })
    }

    #[test]
    fn single_thread_returns_and_prints() {
        let r = run("cps int f(int n) { print(\"n = \", n); return n + 1; }", vec![Value::Int(4)]);
        assert_eq!(r.status, ExitStatus::Clean);
        assert_eq!(r.result, Some(Value::Int(5)));
        assert_eq!(r.output, vec!["n = 4"]);
    }

    #[test]
    fn yields_interleave_threads() {
        let src = "cps void w(int id) { int i = 0; while (i < 3) { print(\"w\", id * 10 + i); yield(); i = i + 1; } }
                   cps int main() { spawn w(1); spawn w(2); return 0; }";
        let r = run(src, vec![]);
        assert_eq!(r.status, ExitStatus::Clean);
        assert_eq!(r.output, vec!["w10", "w20", "w11", "w21", "w12", "w22"]);
    }

    #[test]
    fn unsignalled_wait_deadlocks() {
        let r = run("cps int f() { int c = cond_new(); wait(c); return 0; }", vec![]);
        assert!(matches!(r.status, ExitStatus::Deadlock(_)));
    }

    #[test]
    fn stuck_thread_is_an_error() {
        let r = run("cps int f() { return 1 / 0; }", vec![]);
        assert!(matches!(r.status, ExitStatus::Error(_)));
    }
}
