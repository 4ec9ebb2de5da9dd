//! The trampoline: the cooperative loop that pops frames off ready
//! continuations until a primitive hands the thread back to the
//! scheduler, and the worker pool that runs detached threads.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Mutex;
use std::thread;

use super::code::{lower, Code, Effects, Eval, Heap, LowerError, RtError, Step};
use super::cont::Continuation;
use super::sched::{decode_primitive, pool_primitive, Next, PrimCall, Scheduler, Script, Tid};
use crate::cps::{CpsProgram, Fid};
use crate::lang::{Builtin, Value, SCHED_LOOP, SCHED_POOL};
use crate::semantics::print_line;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub args: Vec<Value>,
    pub script: Script,
    /// Bound on the number of frames invoked, across all threads.
    pub fuel: Option<u64>,
    pub trace: bool,
    /// Worker pool size; defaults to the number of host CPUs.
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExitStatus {
    Clean,
    Deadlock(Vec<String>),
    FuelExhausted,
    Error(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunStats {
    pub frames: u64,
    pub pushes: u64,
    /// Deepest nesting of frame bodies on the host stack.
    pub max_trampoline_depth: usize,
    pub threads: u64,
    pub peak_threads: usize,
    pub switches: u64,
    pub max_continuation_frames: usize,
    pub virtual_time: u64,
    pub detached_runs: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExitReport {
    pub status: ExitStatus,
    /// Value the entry thread finished with.
    pub result: Option<Value>,
    pub output: Vec<String>,
    pub trace: Vec<String>,
    pub stats: RunStats,
}

/// Builtins served by the scheduler, shared with the reference runner.
pub fn scheduler_effect<T>(
    sched: &mut Scheduler<T>,
    output: &mut Vec<String>,
    b: &Builtin,
    args: &[Value],
) -> Result<Value, String> {
    use Value::Int;
    Ok(match (b, args) {
        (Builtin::Print(label), vs) => {
            output.push(print_line(label, vs));
            Value::Unit
        }
        (Builtin::CondNew, []) => Int(sched.cond_new()),
        (Builtin::Signal, [Int(c)]) => {
            sched.signal(*c);
            Value::Unit
        }
        (Builtin::SignalAll, [Int(c)]) => {
            sched.signal_all(*c);
            Value::Unit
        }
        (Builtin::Accept, [Int(k)]) => Int(sched.accept(*k)),
        _ => return Err(format!("{b:?} applied to {args:?}")),
    })
}

fn new_thread(fid: Fid, args: &[Value]) -> Continuation {
    let mut k = Continuation::new();
    k.push(fid, args, None);
    k
}

struct LoopFx<'s> {
    sched: &'s mut Scheduler<Continuation>,
    output: &'s mut Vec<String>,
    spawned: &'s mut u64,
}

impl Effects for LoopFx<'_> {
    fn effect(&mut self, b: &Builtin, args: &[Value]) -> Result<Value, RtError> {
        scheduler_effect(self.sched, self.output, b, args).map_err(RtError::Stuck)
    }

    fn spawn(&mut self, fid: Fid, args: &[Value]) -> Result<Value, RtError> {
        *self.spawned += 1;
        Ok(Value::Int(self.sched.spawn(new_thread(fid, args)) as i64))
    }
}

type Reply = Sender<Result<Value, RtError>>;

enum Msg {
    Print(String),
    Effect(Builtin, Vec<Value>, Reply),
    Spawn(Fid, Vec<Value>, Reply),
    Back(Tid, Continuation),
    Exit(Tid, Continuation, Value),
    Fail(Tid, String),
    OutOfFuel,
    Steps(u64, u64, usize),
}

struct Job {
    tid: Tid,
    k: Continuation,
    v: Value,
}

struct PoolFx<'a> {
    tx: &'a Sender<Msg>,
}

impl PoolFx<'_> {
    fn ask(&self, m: impl FnOnce(Reply) -> Msg) -> Result<Value, RtError> {
        let (rtx, rrx) = mpsc::channel();
        if self.tx.send(m(rtx)).is_err() {
            return Err(RtError::Stuck("loop has stopped".into()));
        }
        rrx.recv().unwrap_or_else(|_| Err(RtError::Stuck("loop has stopped".into())))
    }
}

impl Effects for PoolFx<'_> {
    fn effect(&mut self, b: &Builtin, args: &[Value]) -> Result<Value, RtError> {
        if let Builtin::Print(label) = b {
            let _ = self.tx.send(Msg::Print(print_line(label, args)));
            return Ok(Value::Unit);
        }
        self.ask(|r| Msg::Effect(b.clone(), args.to_vec(), r))
    }

    fn spawn(&mut self, fid: Fid, args: &[Value]) -> Result<Value, RtError> {
        self.ask(|r| Msg::Spawn(fid, args.to_vec(), r))
    }
}

struct Shared<'a> {
    code: &'a Code,
    mem: &'a Mutex<Heap>,
    abort: AtomicBool,
    pool_steps: AtomicU64,
    fuel: u64,
    jobs: Mutex<Receiver<Job>>,
}

fn worker(sh: &Shared<'_>, tx: Sender<Msg>) {
    let mut ev = Eval::new(sh.code, sh.mem);
    loop {
        let job = {
            let rx = sh.jobs.lock().unwrap_or_else(|e| e.into_inner());
            rx.recv()
        };
        let Ok(Job { tid, mut k, v }) = job else {
            return;
        };
        let mut fx = PoolFx { tx: &tx };
        let mut val = v;
        let before = (ev.steps, ev.pushes);
        let msg = loop {
            if sh.abort.load(Ordering::Relaxed) {
                return;
            }
            if sh.pool_steps.fetch_add(1, Ordering::Relaxed) >= sh.fuel {
                break Msg::OutOfFuel;
            }
            match ev.step(&mut k, val, &mut fx) {
                Ok(Step::Invoke(v)) => val = v,
                Ok(Step::Done(v)) => break Msg::Exit(tid, k, v),
                Ok(Step::Prim(p, a, n)) => match decode_primitive(p, &a[..n]).and_then(pool_primitive) {
                    Ok(Some(v)) => val = v,
                    Ok(None) => break Msg::Back(tid, k),
                    Err(e) => break Msg::Fail(tid, e),
                },
                Err(e) => break Msg::Fail(tid, e.to_string()),
            }
        };
        let _ = tx.send(Msg::Steps(ev.steps - before.0, ev.pushes - before.1, ev.max_frame_depth));
        if tx.send(msg).is_err() {
            return;
        }
    }
}

/// Lower and run a converted program.
pub fn run_program(ir: &CpsProgram, opts: &RunOptions) -> Result<ExitReport, LowerError> {
    Ok(run(&lower(ir)?, opts))
}

/// Run `code` from its entry point until every thread has finished.
pub fn run(code: &Code, opts: &RunOptions) -> ExitReport {
    let mem = Mutex::new(Heap::new(code.globals.clone()));
    let (jobs_tx, jobs_rx) = mpsc::channel();
    let sh = Shared {
        code,
        mem: &mem,
        abort: AtomicBool::new(false),
        pool_steps: AtomicU64::new(0),
        fuel: opts.fuel.unwrap_or(u64::MAX),
        jobs: Mutex::new(jobs_rx),
    };
    thread::scope(|scope| {
        let mut l = Loop::new(&sh, opts, jobs_tx);
        // Dropping the loop closes both channels, which lets the workers
        // exit before the scope joins them.
        l.run(scope)
    })
}

struct Loop<'a, 'c> {
    sh: &'a Shared<'c>,
    opts: &'a RunOptions,
    sched: Scheduler<Continuation>,
    output: Vec<String>,
    stats: RunStats,
    result: Option<Value>,
    status: Option<ExitStatus>,
    tx: Sender<Msg>,
    rx: Receiver<Msg>,
    jobs: Sender<Job>,
    pool_started: bool,
}

impl<'a, 'c> Loop<'a, 'c> {
    fn new(sh: &'a Shared<'c>, opts: &'a RunOptions, jobs: Sender<Job>) -> Self {
        let mut sched = Scheduler::new(&opts.script);
        if opts.trace {
            sched.trace = Some(Vec::new());
        }
        let (tx, rx) = mpsc::channel();
        Loop {
            sh,
            opts,
            sched,
            output: Vec::new(),
            stats: RunStats::default(),
            result: None,
            status: None,
            tx,
            rx,
            jobs,
            pool_started: false,
        }
    }

    fn fail(&mut self, msg: String) {
        if self.status.is_none() {
            self.status = Some(ExitStatus::Error(msg));
        }
    }

    fn finished(&mut self, tid: Tid, k: Continuation, v: Value) {
        self.sched.exit(tid, v);
        if tid == 0 {
            self.result = Some(v);
        }
        k.finish();
    }

    fn handle(&mut self, m: Msg) {
        match m {
            Msg::Print(line) => self.output.push(line),
            Msg::Effect(b, args, reply) => {
                let r = scheduler_effect(&mut self.sched, &mut self.output, &b, &args).map_err(RtError::Stuck);
                let _ = reply.send(r);
            }
            Msg::Spawn(fid, args, reply) => {
                self.stats.threads += 1;
                let tid = self.sched.spawn(new_thread(fid, &args));
                let _ = reply.send(Ok(Value::Int(tid as i64)));
            }
            Msg::Back(tid, k) => self.sched.reattach(tid, k, Value::Int(SCHED_POOL)),
            Msg::Exit(tid, k, v) => {
                self.sched.detached_exit(tid);
                self.finished(tid, k, v);
            }
            Msg::Fail(tid, e) => self.fail(format!("thread {tid}: {e}")),
            Msg::OutOfFuel => {
                if self.status.is_none() {
                    self.status = Some(ExitStatus::FuelExhausted);
                }
            }
            Msg::Steps(f, p, d) => {
                self.stats.frames += f;
                self.stats.pushes += p;
                self.stats.max_trampoline_depth = self.stats.max_trampoline_depth.max(d);
            }
        }
    }

    fn detach<'s>(&mut self, scope: &'s thread::Scope<'s, '_>, job: Job)
    where
        'a: 's,
    {
        if !self.pool_started {
            self.pool_started = true;
            let n = self
                .opts
                .workers
                .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
                .max(1);
            for _ in 0..n {
                let tx = self.tx.clone();
                let sh = self.sh;
                scope.spawn(move || worker(sh, tx));
            }
        }
        self.stats.detached_runs += 1;
        self.sched.detach(job.tid);
        let _ = self.jobs.send(job);
    }

    fn run<'s>(&mut self, scope: &'s thread::Scope<'s, '_>) -> ExitReport
    where
        'a: 's,
    {
        let code = self.sh.code;
        let mut ev = Eval::new(code, self.sh.mem);
        if self.opts.args.len() != code.entry_arity {
            self.fail(format!(
                "{} expects {} arguments, got {}",
                code.name(code.entry),
                code.entry_arity,
                self.opts.args.len()
            ));
        } else {
            self.stats.threads += 1;
            self.sched.spawn(new_thread(code.entry, &self.opts.args));
        }
        let fuel = self.sh.fuel;
        while self.status.is_none() {
            if self.pool_started {
                while let Ok(m) = self.rx.try_recv() {
                    self.handle(m);
                }
                if self.status.is_some() {
                    break;
                }
            }
            self.stats.peak_threads = self.stats.peak_threads.max(self.sched.thread_count());
            match self.sched.next() {
                Next::Run(tid, mut k, v) => {
                    self.stats.switches += 1;
                    let mut val = v;
                    loop {
                        if ev.steps + self.sh.pool_steps.load(Ordering::Relaxed) >= fuel {
                            self.status = Some(ExitStatus::FuelExhausted);
                            break;
                        }
                        let mut fx = LoopFx {
                            sched: &mut self.sched,
                            output: &mut self.output,
                            spawned: &mut self.stats.threads,
                        };
                        let step = ev.step(&mut k, val, &mut fx);
                        self.stats.max_continuation_frames = self.stats.max_continuation_frames.max(k.depth());
                        match step {
                            Ok(Step::Invoke(v)) => val = v,
                            Ok(Step::Done(v)) => {
                                self.finished(tid, k, v);
                                break;
                            }
                            Ok(Step::Prim(p, a, n)) => match decode_primitive(p, &a[..n]) {
                                Ok(PrimCall::Suspend(r)) => {
                                    self.sched.suspend(tid, k, r);
                                    break;
                                }
                                Ok(PrimCall::Link(SCHED_LOOP)) => val = Value::Int(SCHED_LOOP),
                                Ok(PrimCall::Link(_)) => {
                                    self.detach(
                                        scope,
                                        Job {
                                            tid,
                                            k,
                                            v: Value::Int(SCHED_LOOP),
                                        },
                                    );
                                    break;
                                }
                                Err(e) => {
                                    self.fail(format!("thread {tid}: {e}"));
                                    break;
                                }
                            },
                            Err(e) => {
                                self.fail(format!("thread {tid}: {e}"));
                                break;
                            }
                        }
                    }
                }
                Next::WaitPool => match self.rx.recv() {
                    Ok(m) => self.handle(m),
                    Err(_) => self.fail("worker pool disappeared".into()),
                },
                Next::Done => self.status = Some(ExitStatus::Clean),
                Next::Deadlock(states) => self.status = Some(ExitStatus::Deadlock(states)),
            }
        }
        self.sh.abort.store(true, Ordering::Relaxed);
        while let Ok(m) = self.rx.try_recv() {
            if let Msg::Steps(..) = m {
                self.handle(m);
            }
        }
        self.stats.frames += ev.steps;
        self.stats.pushes += ev.pushes;
        self.stats.max_trampoline_depth = self.stats.max_trampoline_depth.max(ev.max_frame_depth);
        self.stats.virtual_time = self.sched.now();
        ExitReport {
            status: self.status.clone().unwrap_or(ExitStatus::Clean),
            result: self.result,
            output: std::mem::take(&mut self.output),
            trace: self.sched.trace.take().unwrap_or_default(),
            stats: self.stats.clone(),
        }
    }
}
