//! Structural comparison of programs modulo the spelling of synthesized names.
#![allow(dead_code)]

pub mod surface;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use cpc_core::frontend::print_fun_decl;
use cpc_core::{FunDecl, Name, Program, Term, TermKind};

fn strip(t: &mut Term) {
    while let TermKind::LetRec(_, rest) = &mut t.kind {
        let r = std::mem::replace(rest.as_mut(), Term::unit());
        *t = r;
    }
    for c in t.children_mut() {
        strip(c);
    }
    // a declaration written last leaves an empty tail behind
    if let TermKind::Seq(a, b) = &mut t.kind {
        if b.is_unit() {
            let a = std::mem::replace(a.as_mut(), Term::unit());
            *t = a;
        }
    }
}

fn labels(t: &Term, out: &mut BTreeSet<Name>) {
    t.walk(&mut |t| {
        if let TermKind::Labelled(l, _) = &t.kind {
            out.insert(l.clone());
        }
    });
}

/// Every function, top-level or inner, with its body printed without the
/// inner declarations, keyed by name, plus the enclosing function.
fn flatten(p: &Program) -> (Vec<Name>, BTreeMap<Name, (Option<Name>, String)>, BTreeSet<Name>) {
    let mut order = Vec::new();
    let mut funs = BTreeMap::new();
    let mut binders = BTreeSet::new();
    fn go(
        f: &FunDecl,
        parent: Option<&Name>,
        order: &mut Vec<Name>,
        funs: &mut BTreeMap<Name, (Option<Name>, String)>,
        binders: &mut BTreeSet<Name>,
    ) {
        let mut g = f.clone();
        strip(&mut g.body);
        g.body = g.body.normalize();
        binders.insert(f.name.clone());
        binders.extend(f.bound_names());
        labels(&f.body, binders);
        order.push(f.name.clone());
        funs.insert(f.name.clone(), (parent.cloned(), print_fun_decl(&g)));
        for d in direct_inner(&f.body) {
            go(d, Some(&f.name), order, funs, binders);
        }
    }
    for f in &p.funs {
        go(f, None, &mut order, &mut funs, &mut binders);
    }
    (order, funs, binders)
}

fn direct_inner(t: &Term) -> Vec<&FunDecl> {
    let mut out = Vec::new();
    fn walk<'a>(t: &'a Term, out: &mut Vec<&'a FunDecl>) {
        if let TermKind::LetRec(ds, _) = &t.kind {
            out.extend(ds.iter());
        }
        for c in t.children() {
            walk(c, out);
        }
    }
    walk(t, &mut out);
    out
}

fn idents(s: &str) -> Vec<(usize, usize)> {
    let b = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        if b[i] == b'"' {
            i += 1;
            while i < b.len() && b[i] != b'"' {
                i += 1;
            }
            i += 1;
        } else if b[i].is_ascii_alphabetic() || b[i] == b'_' {
            let st = i;
            while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'_') {
                i += 1;
            }
            out.push((st, i));
        } else {
            i += 1;
        }
    }
    out
}

/// Canonical text of `p`: functions are visited from the ones named in
/// `keep` in program order, synthesized names are renumbered by first
/// occurrence, and every function is listed separately with its parent.
pub fn canonical(p: &Program, keep: &BTreeSet<Name>) -> String {
    let (order, funs, binders) = flatten(p);
    let mut ids: BTreeMap<String, String> = BTreeMap::new();
    let mut queue: VecDeque<Name> = order.iter().filter(|n| keep.contains(*n)).cloned().collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    while let Some(f) = queue.pop_front() {
        if !seen.insert(f.clone()) {
            continue;
        }
        let (parent, text) = &funs[&f];
        let mut s = String::new();
        let mut last = 0;
        for (a, b) in idents(text) {
            let w = &text[a..b];
            s.push_str(&text[last..a]);
            last = b;
            let gen = binders.iter().any(|n| n.as_ref() == w) && !keep.iter().any(|n| n.as_ref() == w);
            if gen {
                let next = format!("_g{}", ids.len());
                let id = ids.entry(w.to_string()).or_insert(next).clone();
                s.push_str(&id);
                if let Some(n) = funs.keys().find(|n| n.as_ref() == w) {
                    queue.push_back(n.clone());
                }
            } else {
                s.push_str(w);
                if let Some(n) = funs.keys().find(|n| n.as_ref() == w) {
                    queue.push_back(n.clone());
                }
            }
        }
        s.push_str(&text[last..]);
        let parent = parent.as_ref().map(|p| ids.get(p.as_ref()).cloned().unwrap_or_else(|| p.to_string()));
        out.push(format!("-- in {}\n{s}", parent.unwrap_or_else(|| "<top>".into())));
    }
    for f in &order {
        if !seen.contains(f) {
            out.push(format!("-- unreachable {f}"));
        }
    }
    let mut globals: Vec<String> = p.globals.iter().map(|g| format!("global {} = {:?}", g.name, g.init)).collect();
    globals.extend(out);
    globals.join("\n")
}

/// Names written in the source text, which are kept as they are.
pub fn source_names(p: &Program) -> BTreeSet<Name> {
    flatten(p).2
}

/// Compare two programs structurally; on mismatch return both canonical forms.
pub fn same_shape(got: &Program, want: &Program, keep: &BTreeSet<Name>) -> Result<(), String> {
    let (a, b) = (canonical(got, keep), canonical(want, keep));
    if a == b {
        Ok(())
    } else {
        Err(format!("got:\n{a}\nwant:\n{b}"))
    }
}

pub struct Case {
    pub name: String,
    pub src: String,
    pub args: Vec<cpc_core::Value>,
    pub script: cpc_core::runtime::Script,
}

pub fn corpus_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus")
}

/// Every `.cpl` file of the bundled corpus with its `// args:` header and
/// sibling `.script`, in name order.
pub fn corpus() -> Vec<Case> {
    let mut paths: Vec<_> = std::fs::read_dir(corpus_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "cpl"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let src = std::fs::read_to_string(&p).unwrap();
            let args = src
                .lines()
                .find_map(|l| l.strip_prefix("// args:"))
                .map(|a| a.split_whitespace().map(|n| cpc_core::Value::Int(n.parse().unwrap())).collect())
                .unwrap_or_default();
            let script = std::fs::read_to_string(p.with_extension("script"))
                .map(|s| cpc_core::runtime::Script::parse(&s).unwrap())
                .unwrap_or_default();
            Case {
                name: p.file_stem().unwrap().to_string_lossy().into_owned(),
                src,
                args,
                script,
            }
        })
        .collect()
}

/// Runtime and reference reports for one corpus case.
pub fn run_both(c: &Case, trace: bool) -> (cpc_core::runtime::ExitReport, cpc_core::runtime::ExitReport) {
    use cpc_core::runtime::{run_program, RunOptions};
    let opts = RunOptions {
        args: c.args.clone(),
        script: c.script.clone(),
        trace,
        ..Default::default()
    };
    let compiled = cpc_core::compile(&c.src, cpc_core::Stage::Cps).unwrap_or_else(|e| panic!("{}: {e}", c.name));
    let rt = run_program(compiled.cps.as_ref().unwrap(), &opts).unwrap_or_else(|e| panic!("{}: {e}", c.name));
    let reference = cpc_core::semantics::program::run_reference(&compiled.ast, &opts);
    (rt, reference)
}

pub fn goldens_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/goldens")
}

/// Check the goto-insertion, split and lifted forms of `goldens/<case>.cpl`
/// against the listings next to it.
pub fn golden(case: &str) -> Result<(), String> {
    use cpc_core::boxing::box_program;
    use cpc_core::splitting::make_flow_explicit;
    use cpc_core::{compile, parse, Stage};
    let dir = goldens_dir();
    let read = |ext: &str| std::fs::read_to_string(dir.join(format!("{case}.{ext}"))).map_err(|e| e.to_string());
    let src = read("cpl")?;
    let ast = parse(&src).map_err(|e| e.to_string())?;
    let keep = source_names(&ast);
    let c = compile(&src, Stage::Lifted).map_err(|e| e.to_string())?;
    let boxed = box_program(&ast).map_err(|e| e.to_string())?.0;
    let explicit = make_flow_explicit(&boxed).map_err(|e| e.to_string())?;
    let stages = [
        ("explicit", explicit),
        ("split", c.split.clone().expect("split stage").0),
        ("lifted", c.lifted.clone().expect("lifted stage").0),
    ];
    for (ext, got) in stages {
        let want = parse(&read(ext)?).map_err(|e| format!("{case}.{ext}: {e}"))?;
        same_shape(&got, &want, &keep).map_err(|e| format!("{case}.{ext} differs\n{e}"))?;
    }
    Ok(())
}
