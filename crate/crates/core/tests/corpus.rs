mod support;

use cpc_core::runtime::ExitStatus;

#[test]
fn corpus_is_large_enough() {
    assert!(support::corpus().len() >= 20);
}

#[test]
fn runtime_output_matches_reference() {
    let mut failures = Vec::new();
    for c in support::corpus() {
        let (rt, reference) = support::run_both(&c, false);
        println!("{}: {:?} {} lines", c.name, rt.status, rt.output.len());
        if rt.status != ExitStatus::Clean {
            failures.push(format!("{}: runtime ended with {:?}", c.name, rt.status));
        }
        if rt.output != reference.output || rt.status != reference.status || rt.result != reference.result {
            failures.push(format!(
                "{}:\n  runtime   {:?} {:?} {:?}\n  reference {:?} {:?} {:?}",
                c.name, rt.status, rt.result, rt.output, reference.status, reference.result, reference.output
            ));
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn scripted_runs_are_deterministic() {
    for c in support::corpus() {
        let (a, _) = support::run_both(&c, true);
        let (b, _) = support::run_both(&c, true);
        assert_eq!(a.trace, b.trace, "{}", c.name);
        assert_eq!(a.output, b.output, "{}", c.name);
    }
}
