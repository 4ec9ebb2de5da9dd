use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cpc_core::bench::{machine_info, run_bench};
use cpc_core::pipeline::{compile_program, CompileStats};
use cpc_core::runtime::{run_program, ExitStatus, RunOptions, Script};
use cpc_core::semantics::program::run_reference;
use cpc_core::semantics::{interpreter_suite, lifting_suite, with_big_stack, Profile, SuiteReport};
use cpc_core::{compile, parse, CompileError, Stage, Value};

const EXIT_COMPILE: u8 = 1;
const EXIT_DEADLOCK: u8 = 2;
const EXIT_DISAGREE: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(name = "cpc", version, about = "Compile threaded programs to continuation-passing events and run them")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the passes and print an intermediate form.
    Compile {
        file: PathBuf,
        /// ast, boxed, split, lifted or cps.
        #[arg(long, default_value = "cps")]
        emit: Stage,
        /// Print boxing and lifting counts instead of the program.
        #[arg(long)]
        stats: bool,
    },
    /// Compile and execute a program from its entry point.
    Run {
        file: PathBuf,
        /// Integer arguments of the entry function.
        #[arg(allow_negative_numbers = true)]
        args: Vec<i64>,
        /// Readiness events, one `at <tick> ready <key> <in|out>` per line.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long)]
        fuel: Option<u64>,
        /// Print the scheduler trace to stderr.
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        workers: Option<usize>,
        /// Also run the source under the reference interpreter and compare.
        #[arg(long)]
        check: bool,
    },
    /// Differential testing of the reference interpreters on generated programs.
    CheckSemantics {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        count: u64,
        #[arg(long, default_value_t = 100_000)]
        fuel: u64,
        /// liftable or any.
        #[arg(long, default_value = "any")]
        profile: Profile,
    },
    /// Time the thread primitives.
    Bench {
        /// Multiply the iteration counts.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Boxing and lifting fractions over a directory of programs.
    Stats { dir: PathBuf },
}

fn read(path: &Path) -> Result<String, ExitCode> {
    std::fs::read_to_string(path).map_err(|e| {
        eprintln!("cpc: {}: {e}", path.display());
        ExitCode::from(EXIT_COMPILE)
    })
}

fn compile_error(path: &Path, e: &CompileError) -> ExitCode {
    eprintln!("{}: {e}", path.display());
    ExitCode::from(EXIT_COMPILE)
}

fn print_stats(s: &CompileStats) {
    println!("locals          {}", s.locals);
    println!("boxed           {}", s.boxed);
    println!("split functions {}", s.split_functions);
    println!("cps locals      {}", s.cps_locals);
    println!("lifted          {}", s.lifted);
    println!("lifted boxed    {}", s.lifted_boxed);
    println!("added params    {}", s.added_params);
    println!("cps functions   {}", s.cps_functions);
}

fn cmd_compile(file: &Path, emit: Stage, stats: bool) -> ExitCode {
    let src = match read(file) {
        Ok(s) => s,
        Err(c) => return c,
    };
    let until = if stats { Stage::Cps } else { emit };
    match compile(&src, until) {
        Ok(c) if stats => {
            print_stats(&c.stats());
            ExitCode::SUCCESS
        }
        Ok(c) => {
            print!("{}", c.emit(emit).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => compile_error(file, &e),
    }
}

fn status_code(s: &ExitStatus) -> ExitCode {
    match s {
        ExitStatus::Clean => ExitCode::SUCCESS,
        ExitStatus::Deadlock(_) => ExitCode::from(EXIT_DEADLOCK),
        ExitStatus::FuelExhausted | ExitStatus::Error(_) => ExitCode::from(EXIT_RUNTIME),
    }
}

fn cmd_run(file: &Path, opts: RunOptions, check: bool) -> ExitCode {
    let src = match read(file) {
        Ok(s) => s,
        Err(c) => return c,
    };
    let c = match compile(&src, Stage::Cps) {
        Ok(c) => c,
        Err(e) => return compile_error(file, &e),
    };
    let r = match run_program(c.cps.as_ref().expect("cps stage"), &opts) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{}: {e}", file.display());
            return ExitCode::from(EXIT_COMPILE);
        }
    };
    for line in &r.output {
        println!("{line}");
    }
    for line in &r.trace {
        eprintln!("trace: {line}");
    }
    match &r.status {
        ExitStatus::Clean => {}
        ExitStatus::Deadlock(states) => {
            eprintln!("deadlock:");
            for s in states {
                eprintln!("  {s}");
            }
        }
        ExitStatus::FuelExhausted => eprintln!("out of fuel"),
        ExitStatus::Error(e) => eprintln!("error: {e}"),
    }
    if let Some(v) = r.result {
        eprintln!("result: {v}");
    }
    let s = &r.stats;
    eprintln!(
        "frames {} threads {} switches {} max trampoline depth {} virtual time {}",
        s.frames, s.threads, s.switches, s.max_trampoline_depth, s.virtual_time
    );
    if check {
        let reference = run_reference(&c.ast, &opts);
        if reference.output != r.output || reference.status != r.status || reference.result != r.result {
            eprintln!("reference interpreter disagrees:");
            eprintln!("  status {:?} result {:?}", reference.status, reference.result);
            for line in &reference.output {
                eprintln!("  | {line}");
            }
            return ExitCode::from(EXIT_DISAGREE);
        }
        eprintln!("reference interpreter agrees");
    }
    status_code(&r.status)
}

fn show_suite(name: &str, r: &SuiteReport) {
    println!(
        "{name}: {} programs, {} checks, {} agree ({} without a value), {} not applicable, {} disagree",
        r.programs,
        r.checked,
        r.agreed,
        r.no_value,
        r.inapplicable,
        r.failures.len()
    );
    for (seed, d) in &r.failures {
        println!("-- seed {seed}\n{d}");
    }
}

fn cmd_check(seed: u64, count: u64, fuel: u64, profile: Profile) -> ExitCode {
    let seeds = seed..seed.saturating_add(count);
    let (a, b) = with_big_stack(move || {
        (
            interpreter_suite(seeds.clone(), profile, fuel),
            lifting_suite(seeds, profile, fuel),
        )
    });
    show_suite("naive vs optimised", &a);
    show_suite("original vs lifted", &b);
    if a.passed() && b.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_DISAGREE)
    }
}

fn cmd_bench(scale: f64, reps: usize) -> ExitCode {
    println!("# {}", machine_info());
    println!("# best of {reps}");
    for row in run_bench(scale, reps) {
        println!("{row}");
    }
    ExitCode::SUCCESS
}

fn fraction(a: usize, b: usize) -> String {
    if b == 0 {
        "n/a".into()
    } else {
        format!("{:.1}% ({a}/{b})", 100.0 * a as f64 / b as f64)
    }
}

fn cmd_stats(dir: &Path) -> ExitCode {
    let mut files: Vec<PathBuf> = match std::fs::read_dir(dir) {
        Ok(d) => d
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "cpl"))
            .collect(),
        Err(e) => {
            eprintln!("cpc: {}: {e}", dir.display());
            return ExitCode::from(EXIT_COMPILE);
        }
    };
    files.sort();
    let mut total = CompileStats::default();
    let mut refused = 0;
    for f in &files {
        let src = match read(f) {
            Ok(s) => s,
            Err(c) => return c,
        };
        let ast = match parse(&src) {
            Ok(a) => a,
            Err(e) => return compile_error(f, &CompileError::Parse(e)),
        };
        match compile_program(ast, Stage::Cps, Default::default()) {
            Ok(c) => {
                let s = c.stats();
                total.locals += s.locals;
                total.boxed += s.boxed;
                total.cps_locals += s.cps_locals;
                total.lifted += s.lifted;
                total.lifted_boxed += s.lifted_boxed;
            }
            Err(e @ CompileError::Lift(_)) => {
                refused += 1;
                println!("{}: lifting refused: {e}", f.display());
            }
            Err(e) => return compile_error(f, &e),
        }
    }
    println!("files           {}", files.len());
    println!("lifted          {}   (reference corpus: about 50%)", fraction(total.lifted, total.cps_locals));
    println!("boxed           {}", fraction(total.boxed, total.locals));
    println!("boxed of lifted {}   (reference corpus: about 10%)", fraction(total.lifted_boxed, total.lifted));
    if refused > 0 {
        println!("{refused} file(s) not counted: lifting refused");
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Compile { file, emit, stats } => cmd_compile(&file, emit, stats),
        Cmd::Run {
            file,
            args,
            script,
            fuel,
            trace,
            workers,
            check,
        } => {
            let script = match script {
                Some(p) => match read(&p).map(|s| Script::parse(&s)) {
                    Ok(Ok(s)) => s,
                    Ok(Err(e)) => {
                        eprintln!("{}: {e}", p.display());
                        return ExitCode::from(EXIT_COMPILE);
                    }
                    Err(c) => return c,
                },
                None => Script::default(),
            };
            let opts = RunOptions {
                args: args.into_iter().map(Value::Int).collect(),
                script,
                fuel,
                trace,
                workers,
            };
            cmd_run(&file, opts, check)
        }
        Cmd::CheckSemantics {
            seed,
            count,
            fuel,
            profile,
        } => cmd_check(seed, count, fuel, profile),
        Cmd::Bench { scale, reps } => cmd_bench(scale, reps),
        Cmd::Stats { dir } => cmd_stats(&dir),
    }
}
