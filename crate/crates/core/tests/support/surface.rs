//! Seeded generator of terminating surface programs: acyclic cps call
//! graphs, bounded loops, forward and counted backward gotos, boxed
//! locals, spawns and yields.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Gen {
    rng: ChaCha8Rng,
    funs: usize,
    /// Current function index; calls only go to higher indices.
    cur: usize,
    counters: usize,
    labels: usize,
    budget: i32,
    out: String,
}

const VARS: [&str; 3] = ["x", "y", "z"];

impl Gen {
    fn pad(&mut self, ind: usize) {
        for _ in 0..ind {
            self.out.push_str("    ");
        }
    }

    fn line(&mut self, ind: usize, s: &str) {
        self.pad(ind);
        self.out.push_str(s);
        self.out.push('\n');
    }

    fn atom(&mut self) -> String {
        match self.rng.gen_range(0..5) {
            0 => self.rng.gen_range(-3..10).to_string(),
            1 => "a".into(),
            2 => "g".into(),
            _ => VARS[self.rng.gen_range(0..VARS.len())].into(),
        }
    }

    fn expr(&mut self, depth: u32) -> String {
        if depth == 0 || self.rng.gen_bool(0.4) {
            return self.atom();
        }
        let l = self.expr(depth - 1);
        let r = self.expr(depth - 1);
        match self.rng.gen_range(0..5) {
            0 => format!("({l} + {r})"),
            1 => format!("({l} - {r})"),
            2 => format!("({l} * {r} % 97)"),
            3 => format!("nat({l}, {r})"),
            _ => format!("({l} % 5)"),
        }
    }

    fn cond(&mut self) -> String {
        let l = self.expr(1);
        let r = self.expr(1);
        let op = ["<", "<=", "==", "!=", ">"][self.rng.gen_range(0..5)];
        format!("{l} {op} {r}")
    }

    fn callee(&mut self) -> Option<usize> {
        (self.cur + 1 < self.funs).then(|| self.rng.gen_range(self.cur + 1..self.funs))
    }

    fn stmts(&mut self, ind: usize, n: usize, in_loop: bool) {
        for _ in 0..n {
            if self.budget <= 0 {
                return;
            }
            self.budget -= 1;
            self.stmt(ind, in_loop);
        }
    }

    fn stmt(&mut self, ind: usize, in_loop: bool) {
        let v = VARS[self.rng.gen_range(0..VARS.len())];
        match self.rng.gen_range(0..14) {
            0 | 1 => {
                let e = self.expr(2);
                self.line(ind, &format!("{v} = {e};"));
            }
            2 | 3 => match self.callee() {
                Some(j) => {
                    let e = self.expr(1);
                    if self.rng.gen_bool(0.7) {
                        self.line(ind, &format!("{v} = f{j}({e});"));
                    } else {
                        self.line(ind, &format!("f{j}({e});"));
                    }
                }
                None => self.line(ind, "yield();"),
            },
            4 => self.line(ind, "yield();"),
            5 => {
                let e = self.expr(2);
                let tag = self.cur;
                self.line(ind, &format!("print(\"f{tag} \", {e});"));
            }
            6 | 7 => {
                let c = self.cond();
                self.line(ind, &format!("if ({c}) {{"));
                let n = self.rng.gen_range(1..4);
                self.stmts(ind + 1, n, in_loop);
                if self.rng.gen_bool(0.5) {
                    self.line(ind, "} else {");
                    let n = self.rng.gen_range(1..3);
                    self.stmts(ind + 1, n, in_loop);
                }
                self.line(ind, "}");
            }
            8 => {
                let k = self.counters;
                self.counters += 1;
                let bound = self.rng.gen_range(1..4);
                self.line(ind, &format!("i{k} = 0;"));
                self.line(ind, &format!("while (i{k} < {bound}) {{"));
                self.line(ind + 1, &format!("i{k} = i{k} + 1;"));
                let n = self.rng.gen_range(1..4);
                self.stmts(ind + 1, n, true);
                self.line(ind, "}");
            }
            9 if in_loop => {
                let c = self.cond();
                self.line(ind, &format!("if ({c}) break;"));
            }
            10 => {
                let e = self.expr(1);
                self.line(ind, &format!("p = &{v};"));
                self.line(ind, &format!("*p = *p + {e};"));
            }
            11 if self.cur == 0 => {
                if let Some(j) = self.callee() {
                    let e = self.expr(1);
                    self.line(ind, &format!("spawn f{j}({e});"));
                }
            }
            12 if !in_loop => {
                let c = self.cond();
                let e = self.expr(1);
                self.line(ind, &format!("if ({c}) return {e};"));
            }
            _ => {
                let e = self.expr(1);
                self.line(ind, &format!("g = g + {e};"));
            }
        }
    }

    fn function(&mut self, i: usize) {
        self.cur = i;
        self.counters = 0;
        let start = self.out.len();
        self.out.push_str(&format!("cps int f{i}(int a) {{\n"));
        let decl_at = self.out.len();
        self.line(1, "x = a;");
        self.line(1, "y = 1;");
        self.line(1, "z = 0;");
        self.budget = self.rng.gen_range(3..10);
        let labelled = self.rng.gen_bool(0.3);
        if labelled {
            // a counted backward goto
            let l = self.labels;
            self.labels += 1;
            self.line(1, "c = 0;");
            self.line(1, &format!("top{l}: {{"));
            self.line(2, "c = c + 1;");
            self.stmts(2, 3, false);
            self.line(2, &format!("if (c < 2) goto top{l};"));
            self.line(1, "}");
        } else {
            self.stmts(1, 4, false);
        }
        if self.rng.gen_bool(0.3) {
            // a forward goto over some statements
            let l = self.labels;
            self.labels += 1;
            let c = self.cond();
            self.line(1, &format!("if ({c}) goto skip{l};"));
            self.stmts(1, 2, false);
            self.line(1, &format!("skip{l}: {{"));
            self.line(2, "z = z + 1;");
            self.line(1, "}");
        }
        let e = self.expr(2);
        self.line(1, &format!("return {e};"));
        self.out.push_str("}\n\n");
        let mut decls = String::from("    int x;\n    int y;\n    int z;\n    int c;\n    int *p;\n");
        for k in 0..self.counters {
            decls.push_str(&format!("    int i{k};\n"));
        }
        self.out.insert_str(decl_at, &decls);
        let _ = start;
    }
}

/// Source text of a closed, terminating program with entry `f0(int a)`.
pub fn program(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let funs = rng.gen_range(1..5);
    let mut g = Gen {
        rng,
        funs,
        cur: 0,
        counters: 0,
        labels: 0,
        budget: 0,
        out: String::from("int g = 0;\n\nint nat(int u, int v) {\n    return u * 3 - v;\n}\n\n"),
    };
    for i in 0..funs {
        g.function(i);
    }
    g.out
}
