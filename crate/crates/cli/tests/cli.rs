use std::path::PathBuf;
use std::process::{Command, Output};

fn core(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core").join(rel)
}

fn cpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpc")).args(args).output().expect("run cpc")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(rel: &str) -> String {
    core(rel).to_string_lossy().into_owned()
}

#[test]
fn emit_lifted_gives_three_top_level_functions() {
    let o = cpc(&["compile", "--emit=lifted", &path("corpus/rc_done.cpl")]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("cps int ")).count(), 3, "{text}");
}

#[test]
fn emit_ast_is_the_parse_dump() {
    let o = cpc(&["compile", "--emit=ast", &path("corpus/rc_done.cpl")]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("Program entry=f"));
}

#[test]
fn compile_output_is_deterministic() {
    let f = path("corpus/nested_loops.cpl");
    for stage in ["--emit=split", "--emit=lifted", "--emit=cps"] {
        assert_eq!(cpc(&["compile", stage, &f]).stdout, cpc(&["compile", stage, &f]).stdout);
    }
}

#[test]
fn counterexample_is_refused_naming_rc() {
    let o = cpc(&["compile", "--emit=lifted", &path("tests/goldens/counterexample.cpl")]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("`rc`") && err.contains("11:5"), "{err}");
}

#[test]
fn negative_argument_takes_the_yield_path() {
    let o = cpc(&["run", &path("corpus/rc_done.cpl"), "--", "-3"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "rc = 0\n");
    assert!(String::from_utf8_lossy(&o.stderr).contains("result: 0"));
}

#[test]
fn positive_argument_agrees_with_reference() {
    let o = cpc(&["run", "--check", &path("corpus/rc_done.cpl"), "5"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "rc = 5\n");
    assert!(String::from_utf8_lossy(&o.stderr).contains("result: 5"));
}

#[test]
fn echo_demo_serves_two_connections() {
    let o = cpc(&[
        "run",
        "--check",
        &path("corpus/echo.cpl"),
        "--script",
        &path("corpus/echo.script"),
    ]);
    assert!(o.status.success());
    let out = stdout(&o);
    let closed: Vec<&str> = out.lines().filter(|l| l.starts_with("close ")).collect();
    assert_eq!(closed.len(), 2, "{out}");
    for conn in [101, 102] {
        let echoed = out.lines().filter(|l| l.starts_with(&format!("echo {conn}"))).count();
        assert_eq!(echoed, 3, "{out}");
    }
}

#[test]
fn deadlock_exits_with_two() {
    let dir = std::env::temp_dir().join(format!("cpc-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let f = dir.join("dead.cpl");
    std::fs::write(&f, "cps int main() { int c = cond_new(); wait(c); return 0; }").unwrap();
    let o = cpc(&["run", &f.to_string_lossy()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fuel_exhaustion_is_reported() {
    let o = cpc(&["run", "--fuel", "10", &path("corpus/deep_tail.cpl"), "20000"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("out of fuel"));
}

#[test]
fn check_semantics_small_run_agrees() {
    for profile in ["any", "liftable"] {
        let o = cpc(&["check-semantics", "--seed", "7", "--count", "20", "--fuel", "100000", "--profile", profile]);
        assert!(o.status.success(), "{}", stdout(&o));
        assert!(stdout(&o).contains("0 disagree"));
    }
}

#[test]
fn stats_prints_three_fractions() {
    let o = cpc(&["stats", &path("corpus")]);
    assert!(o.status.success());
    let out = stdout(&o);
    for key in ["lifted ", "boxed ", "boxed of lifted "] {
        assert!(out.lines().any(|l| l.starts_with(key) && l.contains('%')), "{out}");
    }
}

#[test]
fn bench_prints_six_rows() {
    let o = cpc(&["bench", "--scale", "0.01", "--reps", "1"]);
    assert!(o.status.success());
    let out = stdout(&o);
    for row in ["loop", "call", "cps-call", "switch", "cond", "spawn"] {
        assert!(out.lines().any(|l| l.split_whitespace().next() == Some(row)), "{out}");
    }
}
