//! Seeded generator of closed core programs for the differential suites.
//!
//! Every function takes a depth parameter first. Calls that may recurse (to
//! the function being defined or one of its enclosing functions) are guarded
//! by `d > 0` and pass `d - 1`; depth parameters are never assigned, so
//! generated programs terminate unless the call tree is too wide for the
//! fuel budget.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::lang::{name, Builtin, FunDecl, FunKind, Name, Param, Term};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Inner functions are only ever called in tail position, so every
    /// parameter is liftable.
    Liftable,
    /// No restriction on call positions; division may get stuck.
    Any,
}

impl std::str::FromStr for Profile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "liftable" => Ok(Profile::Liftable),
            "any" => Ok(Profile::Any),
            _ => Err(format!("unknown profile {s}")),
        }
    }
}

#[derive(Clone)]
struct FunInfo {
    name: Name,
    extra: usize,
    depth: Name,
    ancestor: bool,
    inner: bool,
}

struct Gen {
    rng: ChaCha8Rng,
    profile: Profile,
    next: usize,
    vars: Vec<Name>,
    depths: Vec<Name>,
    funs: Vec<FunInfo>,
    in_fun: bool,
}

impl Gen {
    fn fresh(&mut self, base: &str) -> Name {
        self.next += 1;
        name(&format!("{base}{}", self.next))
    }

    fn leaf(&mut self) -> Term {
        let n = self.vars.len() + self.depths.len();
        if n > 0 && self.rng.gen_bool(0.5) {
            let i = self.rng.gen_range(0..n);
            let x = if i < self.vars.len() {
                self.vars[i].clone()
            } else {
                self.depths[i - self.vars.len()].clone()
            };
            Term::var_n(x)
        } else {
            Term::int(self.rng.gen_range(-3..=5))
        }
    }

    fn split(&mut self, size: usize, parts: usize) -> Vec<usize> {
        let mut left = size.saturating_sub(1);
        let mut out = Vec::with_capacity(parts);
        for i in 0..parts {
            let s = if i + 1 == parts {
                left
            } else {
                self.rng.gen_range(0..=left)
            };
            left -= s;
            out.push(s.max(1));
        }
        out
    }

    fn callable(&self, tail: bool) -> Vec<usize> {
        (0..self.funs.len())
            .filter(|&i| tail || self.profile == Profile::Any || !self.funs[i].inner)
            .collect()
    }

    fn int(&mut self, size: usize, tail: bool) -> Term {
        if size <= 1 {
            return self.leaf();
        }
        let callable = self.callable(tail);
        let choice = self.rng.gen_range(0..100);
        match choice {
            0..=19 => {
                let ops: &[Builtin] = match self.profile {
                    Profile::Any => &[Builtin::Add, Builtin::Sub, Builtin::Mul, Builtin::Div],
                    Profile::Liftable => &[Builtin::Add, Builtin::Sub, Builtin::Mul],
                };
                let op = ops[self.rng.gen_range(0..ops.len())].clone();
                let s = self.split(size, 2);
                Term::native(op, vec![self.int(s[0], false), self.int(s[1], false)])
            }
            20..=34 => {
                let s = self.split(size, 3);
                let c = self.cond(s[0]);
                Term::if_(c, self.int(s[1], tail), self.int(s[2], tail))
            }
            35..=54 => {
                let s = self.split(size, 2);
                let stmt = if !self.vars.is_empty() && self.rng.gen_bool(0.7) {
                    let x = self.vars[self.rng.gen_range(0..self.vars.len())].clone();
                    Term::assign_n(x, self.int(s[0], false))
                } else {
                    self.int(s[0], false)
                };
                Term::seq(stmt, self.int(s[1], tail))
            }
            55..=74 if size >= 4 => self.letrec(size, tail),
            _ if !callable.is_empty() => {
                let i = callable[self.rng.gen_range(0..callable.len())];
                self.call(i, size)
            }
            _ => self.letrec(size.max(4), tail),
        }
    }

    fn cond(&mut self, size: usize) -> Term {
        let ops = [Builtin::Lt, Builtin::Le, Builtin::Eq, Builtin::Gt];
        let op = ops[self.rng.gen_range(0..ops.len())].clone();
        let s = self.split(size.max(3), 2);
        Term::native(op, vec![self.int(s[0], false), self.int(s[1], false)])
    }

    fn call(&mut self, i: usize, size: usize) -> Term {
        let info = self.funs[i].clone();
        let s = self.split(size, info.extra.max(1));
        let mut args = Vec::new();
        if info.ancestor {
            args.push(Term::native(Builtin::Sub, vec![Term::var_n(info.depth.clone()), Term::int(1)]));
        } else {
            args.push(Term::int(self.rng.gen_range(0..=2)));
        }
        for k in 0..info.extra {
            args.push(self.int(s[k], false));
        }
        let call = Term::call_n(info.name.clone(), args);
        if info.ancestor {
            let guard = Term::native(Builtin::Gt, vec![Term::var_n(info.depth), Term::int(0)]);
            Term::if_(guard, call, self.leaf())
        } else {
            call
        }
    }

    fn letrec(&mut self, size: usize, tail: bool) -> Term {
        let f = self.fresh("f");
        let d = self.fresh("d");
        let extra = self.rng.gen_range(0..=2);
        let params: Vec<Name> = (0..extra).map(|_| self.fresh("x")).collect();
        let s = self.split(size, 2);

        let saved = (self.vars.len(), self.depths.len(), self.funs.len(), self.in_fun);
        let inner = self.in_fun;
        self.vars.extend(params.iter().cloned());
        self.depths.push(d.clone());
        self.funs.push(FunInfo {
            name: f.clone(),
            extra,
            depth: d.clone(),
            ancestor: true,
            inner,
        });
        self.in_fun = true;
        let body = self.int(s[0], true);
        self.vars.truncate(saved.0);
        self.depths.truncate(saved.1);
        self.funs.truncate(saved.2);
        self.in_fun = saved.3;

        self.funs.push(FunInfo {
            name: f.clone(),
            extra,
            depth: d.clone(),
            ancestor: false,
            inner,
        });
        let rest = self.int(s[1], tail);
        self.funs.truncate(saved.2);

        let mut decl = FunDecl::new(&f, FunKind::Cps, &[], body);
        decl.params = std::iter::once(d).chain(params).map(|p| Param::new(p, crate::lang::Ty::Int)).collect();
        Term::letrec(vec![decl], rest)
    }
}

/// Deterministic closed core program of roughly `size` nodes.
pub fn gen_term(seed: u64, size: usize, profile: Profile) -> Term {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        profile,
        next: 0,
        vars: Vec::new(),
        depths: Vec::new(),
        funs: Vec::new(),
        in_fun: false,
    };
    if size <= 1 {
        return Term::int(g.rng.gen_range(-3..=5));
    }
    if size >= 4 {
        g.letrec(size, true)
    } else {
        g.int(size, true)
    }
}
