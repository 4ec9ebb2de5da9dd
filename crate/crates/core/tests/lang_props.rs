use std::collections::BTreeSet;

use proptest::prelude::*;

use cpc_core::semantics::{gen_term, lift_core, liftable_targets, run_naive, run_opt, with_big_stack, Profile};
use cpc_core::{
    extruded_variables, fun_free_variables, name, tail_positions, Builtin, FunDecl, FunKind, Param, Term, TermKind,
    TermPath,
};

fn leaf() -> impl Strategy<Value = Term> {
    prop_oneof![
        (0i64..4).prop_map(Term::int),
        prop_oneof![Just("x"), Just("y")].prop_map(Term::var),
        Just(Term::new(TermKind::Break)),
        Just(Term::goto("l")),
        prop_oneof![Just("x"), Just("y")].prop_map(|v| Term::new(TermKind::AddrOf(name(v)))),
    ]
}

fn term(depth: u32) -> impl Strategy<Value = Term> {
    leaf().prop_recursive(depth, 64, 3, |t| {
        prop_oneof![
            (t.clone(), t.clone()).prop_map(|(a, b)| Term::seq(a, b)),
            (t.clone(), t.clone(), t.clone()).prop_map(|(c, a, b)| Term::if_(c, a, b)),
            (t.clone(), t.clone()).prop_map(|(c, b)| Term::while_(c, b)),
            t.clone().prop_map(Term::ret),
            t.clone().prop_map(|e| Term::assign("x", e)),
            prop::collection::vec(t.clone(), 0..3).prop_map(|a| Term::call("h", a)),
            t.clone().prop_map(|b| Term::labelled("l", b)),
            (t.clone(), t.clone()).prop_map(|(b, r)| {
                Term::letrec(vec![FunDecl::new("h", FunKind::Cps, &["y"], b)], r)
            }),
            t.clone().prop_map(|e| Term::new(TermKind::Deref(Box::new(e)))),
            (t.clone(), t).prop_map(|(a, b)| Term::native(Builtin::Add, vec![a, b])),
        ]
    })
}

fn fun_with(body: Term) -> FunDecl {
    let mut f = FunDecl::new("f", FunKind::Cps, &["x"], body);
    f.locals.push(Param::int("y"));
    f
}

/// Tailness of one position, decided from the chain of steps leading to it:
/// a position is tail when every step from the root, or from the nearest
/// `return` operand or inner function body, keeps the continuation.
fn tail_by_path(body: &Term, path: &[usize]) -> bool {
    let mut node = body;
    let mut since_reset: Vec<bool> = Vec::new();
    for &i in path {
        let keeps = match &node.kind {
            TermKind::If(..) => i == 1 || i == 2,
            TermKind::Seq(..) => i == 1,
            TermKind::Labelled(..) => true,
            TermKind::LetRec(ds, _) if i < ds.len() => {
                since_reset.clear();
                node = node.children()[i];
                continue;
            }
            TermKind::LetRec(..) => true,
            TermKind::Return(_) => {
                since_reset.clear();
                node = node.children()[i];
                continue;
            }
            _ => false,
        };
        since_reset.push(keeps);
        node = node.children()[i];
    }
    since_reset.iter().all(|k| *k)
}

fn all_paths(t: &Term, path: &mut TermPath, out: &mut Vec<TermPath>) {
    out.push(path.clone());
    for (i, c) in t.children().into_iter().enumerate() {
        path.push(i);
        all_paths(c, path, out);
        path.pop();
    }
}

fn check_tail(body: Term) -> Result<(), TestCaseError> {
    let f = fun_with(body);
    let marked = tail_positions(&f);
    let mut paths = Vec::new();
    all_paths(&f.body, &mut Vec::new(), &mut paths);
    let brute: BTreeSet<TermPath> = paths.into_iter().filter(|p| tail_by_path(&f.body, p)).collect();
    prop_assert_eq!(marked, brute);
    Ok(())
}

/// Every term of depth at most `d` over a small constructor set.
fn enumerate(d: u32) -> Vec<Term> {
    let leaves = vec![Term::int(0), Term::var("x"), Term::goto("l")];
    if d == 0 {
        return leaves;
    }
    let sub = enumerate(d - 1);
    let mut out = leaves;
    for a in &sub {
        out.push(Term::ret(a.clone()));
        out.push(Term::labelled("l", a.clone()));
        out.push(Term::letrec(vec![FunDecl::new("h", FunKind::Cps, &[], a.clone())], Term::int(1)));
        out.push(Term::letrec(vec![FunDecl::new("h", FunKind::Cps, &[], Term::int(1))], a.clone()));
        for b in &sub {
            out.push(Term::seq(a.clone(), b.clone()));
            out.push(Term::while_(a.clone(), b.clone()));
            out.push(Term::if_(Term::var("x"), a.clone(), b.clone()));
        }
    }
    out
}

#[test]
fn tail_positions_match_path_rule_on_all_small_terms() {
    let terms = enumerate(2);
    assert!(terms.len() > 1000);
    for t in terms {
        check_tail(t).unwrap();
    }
}

proptest! {
    #[test]
    fn tail_positions_match_path_rule(body in term(6)) {
        check_tail(body)?;
    }

    #[test]
    fn extruded_is_monotone_under_address_of(body in term(4), v in prop_oneof![Just("x"), Just("y")], used in any::<bool>()) {
        let f = fun_with(body.clone());
        let taken = if used {
            Term::assign("x", Term::new(TermKind::AddrOf(name(v))))
        } else {
            Term::new(TermKind::AddrOf(name(v)))
        };
        let g = fun_with(Term::seq(taken, body));
        for ignore in [false, true] {
            prop_assert!(extruded_variables(&f, ignore).is_subset(&extruded_variables(&g, ignore)));
        }
    }

    #[test]
    fn lifted_functions_no_longer_see_the_parameter(seed in 0u64..5000) {
        let t = gen_term(seed, 40, Profile::Liftable);
        for (g, x, hset, ok) in liftable_targets(&t) {
            prop_assume!(ok);
            let lifted = lift_core(&t, &x, &hset);
            let mut hs = Vec::new();
            lifted.walk(&mut |u| if let TermKind::LetRec(ds, _) = &u.kind {
                hs.extend(ds.iter().filter(|d| hset.contains(&d.name)).cloned());
            });
            for h in hs {
                prop_assert!(!fun_free_variables(&h).contains(&x), "{} still free in {} (lifted from {})", x, h.name, g);
            }
        }
    }

    #[test]
    fn more_fuel_never_changes_a_finished_run(seed in 0u64..5000, extra in 0u64..1000) {
        let (ok, msg) = with_big_stack(move || {
            let t = gen_term(seed, 40, Profile::Any);
            for opt in [false, true] {
                let run = |fuel| if opt { run_opt(&t, fuel, false) } else { run_naive(&t, fuel, false) };
                let first = run(100_000);
                if first.result.is_err() && first.steps >= 100_000 {
                    continue;
                }
                for fuel in [first.steps, first.steps + extra, 1_000_000] {
                    let again = run(fuel);
                    if again.result != first.result || again.steps != first.steps {
                        return (false, format!("seed {seed} opt={opt} fuel {fuel}"));
                    }
                }
            }
            (true, String::new())
        });
        prop_assert!(ok, "{}", msg);
    }
}
