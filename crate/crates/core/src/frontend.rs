//! Surface syntax: a lexer, a recursive-descent parser, the source printer and
//! the canonical one-node-per-line tree dump.
//!
//! The grammar is a closed C-like subset:
//!
//! ```text
//! program  := (global | fundecl)*
//! global   := type ident ('=' literal)? ';'
//! fundecl  := 'cps'? type ident '(' (type ident),* ')' block
//! stmt     := fundecl | type decl,* ';' | 'if' '(' e ')' stmt ('else' stmt)?
//!           | 'while' '(' e ')' stmt | 'break' ';' | 'goto' ident ';'
//!           | ident ':' stmt | 'return' e? ';' | 'spawn' ident '(' e,* ')' ';'
//!           | ('detached' | 'attached') block | block | ';' | lhs '=' e ';' | e ';'
//! ```
//!
//! Locals are function-scoped: a declaration anywhere in a body adds the
//! variable to the enclosing function and, when it has an initialiser, leaves
//! an assignment in place.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

use crate::lang::*;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{span}: {message} (expected one of: {})", expected.join(", "))]
pub struct ParseError {
    pub span: Span,
    pub message: String,
    pub expected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Str(String),
    Punct(&'static str),
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    span: Span,
}

const PUNCTS: [&str; 27] = [
    "==", "!=", "<=", ">=", "&&", "||", "(", ")", "{", "}", ",", ";", ":", "=", "<", ">", "+",
    "-", "*", "/", "%", "!", "&", "[", "]", ".", "?",
];

const KEYWORDS: [&str; 20] = [
    "cps", "int", "bool", "void", "cond", "if", "else", "while", "break", "goto", "return",
    "spawn", "detached", "attached", "true", "false", "unit", "print", "native", "struct",
];

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1u32, 1u32);
    let err = |line, col, msg: &str| ParseError {
        span: Span::new(line, col, 1),
        message: msg.to_string(),
        expected: vec![],
    };
    while i < bytes.len() {
        let c = bytes[i];
        if c == b'\n' {
            line += 1;
            col = 1;
            i += 1;
            continue;
        }
        if c.is_ascii_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == b'/' && bytes.get(i + 1) == Some(&b'/') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        if c == b'/' && bytes.get(i + 1) == Some(&b'*') {
            i += 2;
            col += 2;
            while i < bytes.len() && !(bytes[i] == b'*' && bytes.get(i + 1) == Some(&b'/')) {
                if bytes[i] == b'\n' {
                    line += 1;
                    col = 1;
                } else {
                    col += 1;
                }
                i += 1;
            }
            if i >= bytes.len() {
                return Err(err(line, col, "unterminated comment"));
            }
            i += 2;
            col += 2;
            continue;
        }
        let start = i;
        let scol = col;
        if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            let s = &src[start..i];
            col += (i - start) as u32;
            out.push(Token {
                tok: Tok::Ident(s.to_string()),
                span: Span::new(line, scol, (i - start) as u32),
            });
            continue;
        }
        if c.is_ascii_digit() {
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            let n: i64 = src[start..i]
                .parse()
                .map_err(|_| err(line, scol, "integer literal out of range"))?;
            col += (i - start) as u32;
            out.push(Token {
                tok: Tok::Int(n),
                span: Span::new(line, scol, (i - start) as u32),
            });
            continue;
        }
        if c == b'"' {
            i += 1;
            let mut s = String::new();
            while i < bytes.len() && bytes[i] != b'"' {
                if bytes[i] == b'\n' {
                    return Err(err(line, scol, "unterminated string"));
                }
                if bytes[i] == b'\\' && i + 1 < bytes.len() {
                    i += 1;
                    s.push(match bytes[i] {
                        b'n' => '\n',
                        b't' => '\t',
                        other => other as char,
                    });
                } else {
                    s.push(bytes[i] as char);
                }
                i += 1;
            }
            if i >= bytes.len() {
                return Err(err(line, scol, "unterminated string"));
            }
            i += 1;
            col += (i - start) as u32;
            out.push(Token {
                tok: Tok::Str(s),
                span: Span::new(line, scol, (i - start) as u32),
            });
            continue;
        }
        let rest = &src[i..];
        match PUNCTS.iter().find(|p| rest.starts_with(**p)) {
            Some(p) => {
                i += p.len();
                col += p.len() as u32;
                out.push(Token {
                    tok: Tok::Punct(p),
                    span: Span::new(line, scol, p.len() as u32),
                });
            }
            None => return Err(err(line, col, &format!("unexpected character `{}`", c as char))),
        }
    }
    out.push(Token {
        tok: Tok::Eof,
        span: Span::new(line, col, 0),
    });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    /// Locals of the functions being parsed, innermost last.
    scopes: Vec<FunScope>,
    fresh: usize,
}

struct FunScope {
    params: BTreeSet<Name>,
    locals: Vec<Param>,
}

type PResult<T> = Result<T, ParseError>;

fn is_type_kw(s: &str) -> bool {
    matches!(s, "int" | "bool" | "void" | "cond")
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, k: usize) -> &Tok {
        let i = (self.pos + k).min(self.toks.len() - 1);
        &self.toks[i].tok
    }

    fn span(&self) -> Span {
        self.toks[self.pos].span
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error<T>(&self, message: &str, expected: &[&str]) -> PResult<T> {
        Err(ParseError {
            span: self.span(),
            message: message.to_string(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        })
    }

    fn is_punct(&self, p: &str) -> bool {
        matches!(self.peek(), Tok::Punct(q) if *q == p)
    }

    fn is_kw(&self, k: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == k)
    }

    fn eat_punct(&mut self, p: &str) -> bool {
        if self.is_punct(p) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_punct(&mut self, p: &str) -> PResult<Span> {
        if self.is_punct(p) {
            Ok(self.bump().span)
        } else {
            self.error(&format!("unexpected {}", self.describe()), &[p])
        }
    }

    fn describe(&self) -> String {
        match self.peek() {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Int(n) => format!("`{n}`"),
            Tok::Str(s) => format!("string {s:?}"),
            Tok::Punct(p) => format!("`{p}`"),
            Tok::Eof => "end of input".to_string(),
        }
    }

    fn ident(&mut self) -> PResult<(Name, Span)> {
        match self.peek().clone() {
            Tok::Ident(s) if !KEYWORDS.contains(&s.as_str()) => {
                let sp = self.bump().span;
                Ok((name(&s), sp))
            }
            _ => self.error(&format!("unexpected {}", self.describe()), &["identifier"]),
        }
    }

    fn base_type(&mut self) -> PResult<Ty> {
        let t = match self.peek() {
            Tok::Ident(s) if s == "int" => Ty::Int,
            Tok::Ident(s) if s == "bool" => Ty::Bool,
            Tok::Ident(s) if s == "void" => Ty::Void,
            Tok::Ident(s) if s == "cond" => Ty::Cond,
            _ => return self.error("expected a type", &["int", "bool", "void", "cond"]),
        };
        self.bump();
        Ok(t)
    }

    fn stars(&mut self, mut t: Ty) -> Ty {
        while self.eat_punct("*") {
            t = Ty::Ptr(Box::new(t));
        }
        t
    }

    fn looks_like_fundecl(&self) -> bool {
        if self.is_kw("cps") {
            return true;
        }
        match self.peek() {
            Tok::Ident(s) if is_type_kw(s) => {}
            _ => return false,
        }
        let mut k = 1;
        while matches!(self.peek_at(k), Tok::Punct("*")) {
            k += 1;
        }
        matches!(self.peek_at(k), Tok::Ident(_)) && matches!(self.peek_at(k + 1), Tok::Punct("("))
    }

    fn program(&mut self) -> PResult<Program> {
        let mut globals = Vec::new();
        let mut funs: Vec<FunDecl> = Vec::new();
        while *self.peek() != Tok::Eof {
            if self.looks_like_fundecl() {
                let f = self.fundecl()?;
                if funs.iter().any(|g| g.name == f.name) {
                    return Err(ParseError {
                        span: f.span,
                        message: format!("function `{}` defined twice", f.name),
                        expected: vec![],
                    });
                }
                funs.push(f);
            } else {
                let base = self.base_type()?;
                let ty = self.stars(base);
                let (n, _) = self.ident()?;
                let init = if self.eat_punct("=") {
                    self.literal()?
                } else {
                    match ty {
                        Ty::Int => Value::Int(0),
                        Ty::Bool => Value::Bool(false),
                        _ => Value::Unit,
                    }
                };
                self.expect_punct(";")?;
                globals.push(Global { name: n, ty, init });
            }
        }
        let entry = funs
            .iter()
            .find(|f| &*f.name == "main")
            .or_else(|| funs.iter().find(|f| f.is_cps()))
            .map(|f| f.name.clone());
        match entry {
            Some(entry) => Ok(Program {
                globals,
                funs,
                entry,
            }),
            None => self.error("no entry point: the program defines no cps function", &["cps function"]),
        }
    }

    fn literal(&mut self) -> PResult<Value> {
        let neg = self.eat_punct("-");
        match self.peek().clone() {
            Tok::Int(n) => {
                self.bump();
                Ok(Value::Int(if neg { -n } else { n }))
            }
            Tok::Ident(s) if s == "true" && !neg => {
                self.bump();
                Ok(Value::Bool(true))
            }
            Tok::Ident(s) if s == "false" && !neg => {
                self.bump();
                Ok(Value::Bool(false))
            }
            _ => self.error("expected a literal", &["integer", "true", "false"]),
        }
    }

    fn fundecl(&mut self) -> PResult<FunDecl> {
        let start = self.span();
        let kind = if self.is_kw("cps") {
            self.bump();
            FunKind::Cps
        } else {
            FunKind::Native
        };
        let base = self.base_type()?;
        let ret = self.stars(base);
        let (fname, _) = self.ident()?;
        self.expect_punct("(")?;
        let mut params = Vec::new();
        if !self.is_punct(")") {
            loop {
                let base = self.base_type()?;
                let ty = self.stars(base);
                let (pn, psp) = self.ident()?;
                if params.iter().any(|p: &Param| p.name == pn) {
                    return Err(ParseError {
                        span: psp,
                        message: format!("duplicate parameter `{pn}`"),
                        expected: vec![],
                    });
                }
                params.push(Param::new(pn, ty));
                if !self.eat_punct(",") {
                    break;
                }
            }
        }
        self.expect_punct(")")?;
        self.scopes.push(FunScope {
            params: params.iter().map(|p| p.name.clone()).collect(),
            locals: Vec::new(),
        });
        let body = self.block();
        let scope = self.scopes.pop().expect("scope pushed above");
        let body = body?;
        Ok(FunDecl {
            name: fname,
            kind,
            ret,
            params,
            locals: scope.locals,
            body,
            span: start,
        })
    }

    fn block(&mut self) -> PResult<Term> {
        self.expect_punct("{")?;
        let items = self.stmt_list()?;
        self.expect_punct("}")?;
        Ok(items)
    }

    /// Statements up to the closing brace. A run of function definitions
    /// starts a `letrec` group scoped over the remaining statements.
    fn stmt_list(&mut self) -> PResult<Term> {
        let mut items = Vec::new();
        while !self.is_punct("}") && *self.peek() != Tok::Eof {
            if self.looks_like_fundecl() {
                let sp = self.span();
                let mut group = Vec::new();
                while self.looks_like_fundecl() {
                    group.push(self.fundecl()?);
                }
                let rest = self.stmt_list()?;
                items.push(Term::at(TermKind::LetRec(group, Box::new(rest)), sp));
                break;
            }
            if let Some(t) = self.stmt()? {
                items.push(t);
            }
        }
        Ok(Term::block(items))
    }

    fn declare_local(&mut self, n: &Name, ty: Ty, sp: Span) -> PResult<()> {
        let scope = match self.scopes.last_mut() {
            Some(s) => s,
            None => {
                return Err(ParseError {
                    span: sp,
                    message: "declaration outside a function".into(),
                    expected: vec![],
                })
            }
        };
        if scope.params.contains(n) {
            return Err(ParseError {
                span: sp,
                message: format!("local `{n}` shadows a parameter"),
                expected: vec![],
            });
        }
        if !scope.locals.iter().any(|p| &p.name == n) {
            scope.locals.push(Param::new(n.clone(), ty));
        }
        Ok(())
    }

    fn fresh_local(&mut self, base: &str) -> PResult<Name> {
        self.fresh += 1;
        let n = name(&format!("__{base}{}", self.fresh));
        self.declare_local(&n, Ty::Int, Span::default())?;
        Ok(n)
    }

    /// Returns `None` for declarations without initialisers.
    fn stmt(&mut self) -> PResult<Option<Term>> {
        let sp = self.span();
        let tok = self.peek().clone();
        if let Tok::Ident(kw) = &tok {
            match kw.as_str() {
                k if is_type_kw(k) => return self.declaration(),
                "if" => {
                    self.bump();
                    self.expect_punct("(")?;
                    let c = self.expr()?;
                    self.expect_punct(")")?;
                    let a = self.stmt_or_unit()?;
                    let b = if self.is_kw("else") {
                        self.bump();
                        self.stmt_or_unit()?
                    } else {
                        Term::unit()
                    };
                    return Ok(Some(Term::at(
                        TermKind::If(Box::new(c), Box::new(a), Box::new(b)),
                        sp,
                    )));
                }
                "while" => {
                    self.bump();
                    self.expect_punct("(")?;
                    let c = self.expr()?;
                    self.expect_punct(")")?;
                    let b = self.stmt_or_unit()?;
                    return Ok(Some(Term::at(TermKind::While(Box::new(c), Box::new(b)), sp)));
                }
                "break" => {
                    self.bump();
                    self.expect_punct(";")?;
                    return Ok(Some(Term::at(TermKind::Break, sp)));
                }
                "goto" => {
                    self.bump();
                    let (l, _) = self.ident()?;
                    self.expect_punct(";")?;
                    return Ok(Some(Term::at(TermKind::Goto(l), sp)));
                }
                "return" => {
                    self.bump();
                    let e = if self.is_punct(";") {
                        Term::unit()
                    } else {
                        self.expr()?
                    };
                    self.expect_punct(";")?;
                    return Ok(Some(Term::at(TermKind::Return(Box::new(e)), sp)));
                }
                "spawn" => {
                    self.bump();
                    let (f, _) = self.ident()?;
                    let args = self.args()?;
                    self.expect_punct(";")?;
                    return Ok(Some(Term::at(TermKind::NativeCall(Builtin::Spawn(f), args), sp)));
                }
                "detached" | "attached" => {
                    self.bump();
                    let target = if kw == "detached" { SCHED_POOL } else { SCHED_LOOP };
                    let body = self.block()?;
                    return self.expand_link_block(target, body, sp).map(Some);
                }
                _ => {}
            }
            if matches!(self.peek_at(1), Tok::Punct(":")) && !KEYWORDS.contains(&kw.as_str()) {
                let (l, _) = self.ident()?;
                self.bump();
                let t = self.stmt_or_unit()?;
                return Ok(Some(Term::at(TermKind::Labelled(l, Box::new(t)), sp)));
            }
        }
        if self.is_punct("{") {
            return self.block().map(Some);
        }
        if self.eat_punct(";") {
            return Ok(Some(Term::at(TermKind::Const(Value::Unit), sp)));
        }
        let lhs = self.expr()?;
        let t = if self.eat_punct("=") {
            let rhs = self.expr()?;
            match lhs.kind {
                TermKind::Var(x) => Term::at(TermKind::Assign(x, Box::new(rhs)), sp),
                TermKind::Deref(p) => Term::at(TermKind::SetRef(p, Box::new(rhs)), sp),
                _ => {
                    return Err(ParseError {
                        span: sp,
                        message: "invalid assignment target".into(),
                        expected: vec!["variable".into(), "*pointer".into()],
                    })
                }
            }
        } else {
            lhs
        };
        self.expect_punct(";")?;
        Ok(Some(t))
    }

    fn stmt_or_unit(&mut self) -> PResult<Term> {
        Ok(self.stmt()?.unwrap_or_else(Term::unit))
    }

    fn declaration(&mut self) -> PResult<Option<Term>> {
        let base = self.base_type()?;
        let mut inits = Vec::new();
        loop {
            let ty = self.stars(base.clone());
            let (n, sp) = self.ident()?;
            self.declare_local(&n, ty, sp)?;
            if self.eat_punct("=") {
                let e = self.expr()?;
                inits.push(Term::at(TermKind::Assign(n, Box::new(e)), sp));
            }
            if !self.eat_punct(",") {
                break;
            }
        }
        self.expect_punct(";")?;
        Ok(if inits.is_empty() {
            None
        } else {
            Some(Term::block(inits))
        })
    }

    /// `detached { body }` becomes `s = link(pool); body; link(s);`, with every
    /// `return e;` inside the body re-attaching before it returns.
    fn expand_link_block(&mut self, target: i64, body: Term, sp: Span) -> PResult<Term> {
        let saved = self.fresh_local("s")?;
        let link_back = || Term::call("link", vec![Term::var_n(saved.clone())]);
        let mut needs_tmp = false;
        body.walk(&mut |t| {
            if matches!(t.kind, TermKind::Return(_)) {
                needs_tmp = true;
            }
        });
        let mut body = body;
        if needs_tmp {
            let tmp = self.fresh_local("r")?;
            reattach_returns(&mut body, &|e| {
                Term::block(vec![
                    Term::assign_n(tmp.clone(), e),
                    link_back(),
                    Term::ret(Term::var_n(tmp.clone())),
                ])
            });
        }
        Ok(Term::block(vec![
            Term::assign_n(saved.clone(), Term::call("link", vec![Term::int(target)])),
            body,
            link_back(),
        ])
        .with_span(sp))
    }

    fn args(&mut self) -> PResult<Vec<Term>> {
        self.expect_punct("(")?;
        let mut args = Vec::new();
        if !self.is_punct(")") {
            loop {
                args.push(self.expr()?);
                if !self.eat_punct(",") {
                    break;
                }
            }
        }
        self.expect_punct(")")?;
        Ok(args)
    }

    fn expr(&mut self) -> PResult<Term> {
        self.binary(1)
    }

    fn binop(&self) -> Option<Builtin> {
        let p = match self.peek() {
            Tok::Punct(p) => *p,
            _ => return None,
        };
        Some(match p {
            "||" => Builtin::Or,
            "&&" => Builtin::And,
            "==" => Builtin::Eq,
            "!=" => Builtin::Ne,
            "<" => Builtin::Lt,
            "<=" => Builtin::Le,
            ">" => Builtin::Gt,
            ">=" => Builtin::Ge,
            "+" => Builtin::Add,
            "-" => Builtin::Sub,
            "*" => Builtin::Mul,
            "/" => Builtin::Div,
            "%" => Builtin::Rem,
            _ => return None,
        })
    }

    fn binary(&mut self, min: u8) -> PResult<Term> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.binop() {
            let prec = op.precedence();
            if prec < min {
                break;
            }
            let sp = self.bump().span;
            let rhs = self.binary(prec + 1)?;
            lhs = Term::at(TermKind::NativeCall(op, vec![lhs, rhs]), sp);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> PResult<Term> {
        let sp = self.span();
        if self.eat_punct("!") {
            let e = self.unary()?;
            return Ok(Term::at(TermKind::NativeCall(Builtin::Not, vec![e]), sp));
        }
        if self.is_punct("-") {
            self.bump();
            if let Tok::Int(n) = *self.peek() {
                self.bump();
                return Ok(Term::at(TermKind::Const(Value::Int(-n)), sp));
            }
            let e = self.unary()?;
            return Ok(Term::at(TermKind::NativeCall(Builtin::Neg, vec![e]), sp));
        }
        if self.eat_punct("*") {
            let e = self.unary()?;
            return Ok(Term::at(TermKind::Deref(Box::new(e)), sp));
        }
        if self.eat_punct("&") {
            let (x, _) = self.ident()?;
            return Ok(Term::at(TermKind::AddrOf(x), sp));
        }
        self.primary()
    }

    fn primary(&mut self) -> PResult<Term> {
        let sp = self.span();
        match self.peek().clone() {
            Tok::Int(n) => {
                self.bump();
                Ok(Term::at(TermKind::Const(Value::Int(n)), sp))
            }
            Tok::Punct("(") => {
                self.bump();
                if self.is_punct("{") {
                    self.bump();
                    let t = self.stmt_list()?;
                    self.expect_punct("}")?;
                    self.expect_punct(")")?;
                    return Ok(t);
                }
                let e = self.expr()?;
                self.expect_punct(")")?;
                Ok(e)
            }
            Tok::Ident(s) if s == "true" || s == "false" => {
                self.bump();
                Ok(Term::at(TermKind::Const(Value::Bool(s == "true")), sp))
            }
            Tok::Ident(s) if s == "unit" => {
                self.bump();
                Ok(Term::at(TermKind::Const(Value::Unit), sp))
            }
            Tok::Ident(s) if s == "print" => {
                self.bump();
                self.expect_punct("(")?;
                let label = if let Tok::Str(s) = self.peek().clone() {
                    self.bump();
                    if !self.eat_punct(",") {
                        return Ok(self.finish_print(s, vec![], sp)?);
                    }
                    s
                } else {
                    String::new()
                };
                let e = self.expr()?;
                self.finish_print(label, vec![e], sp)
            }
            Tok::Ident(_) => {
                let (x, _) = self.ident()?;
                if self.is_punct("(") {
                    let args = self.args()?;
                    if let Some(b) = Builtin::from_call_name(&x) {
                        return Ok(Term::at(TermKind::NativeCall(b, args), sp));
                    }
                    return Ok(Term::at(TermKind::Call(x, args), sp));
                }
                Ok(Term::at(TermKind::Var(x), sp))
            }
            _ => self.error(
                &format!("unexpected {}", self.describe()),
                &["expression"],
            ),
        }
    }

    fn finish_print(&mut self, label: String, args: Vec<Term>, sp: Span) -> PResult<Term> {
        self.expect_punct(")")?;
        Ok(Term::at(TermKind::NativeCall(Builtin::Print(label), args), sp))
    }
}

/// Rewrite `return e` in the function being parsed, leaving inner
/// definitions alone.
fn reattach_returns(t: &mut Term, wrap: &dyn Fn(Term) -> Term) {
    if let TermKind::Return(e) = &t.kind {
        *t = wrap((**e).clone()).with_span(t.span);
        return;
    }
    if let TermKind::LetRec(_, rest) = &mut t.kind {
        reattach_returns(rest, wrap);
        return;
    }
    for c in t.children_mut() {
        reattach_returns(c, wrap);
    }
}

/// Parse a `.cpl` source text.
pub fn parse(text: &str) -> Result<Program, ParseError> {
    let toks = lex(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        scopes: Vec::new(),
        fresh: 0,
    };
    p.program()
}

// ---------------------------------------------------------------------------
// Printing

/// Render a program back to source. `parse(&print(p))` yields `p` up to
/// sequence normalisation.
pub fn print(p: &Program) -> String {
    let mut out = String::new();
    for g in &p.globals {
        let _ = writeln!(out, "{} = {};", type_decl(&g.ty, &g.name), g.init);
    }
    if !p.globals.is_empty() && !p.funs.is_empty() {
        out.push('\n');
    }
    for (i, f) in p.funs.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        print_fun(f, 0, &mut out);
    }
    out
}

fn type_decl(ty: &Ty, n: &str) -> String {
    let mut stars = String::new();
    let mut t = ty;
    while let Ty::Ptr(inner) = t {
        stars.push('*');
        t = inner;
    }
    format!("{t} {stars}{n}")
}

pub fn print_fun_decl(f: &FunDecl) -> String {
    let mut out = String::new();
    print_fun(f, 0, &mut out);
    out
}

fn print_fun(f: &FunDecl, ind: usize, out: &mut String) {
    let pad = "    ".repeat(ind);
    let params: Vec<String> = f.params.iter().map(|p| type_decl(&p.ty, &p.name)).collect();
    let kw = if f.is_cps() { "cps " } else { "" };
    let _ = writeln!(
        out,
        "{pad}{kw}{}({}) {{",
        type_decl(&f.ret, &f.name),
        params.join(", ")
    );
    for l in &f.locals {
        let _ = writeln!(out, "{pad}    {};", type_decl(&l.ty, &l.name));
    }
    print_items(&f.body, ind + 1, out);
    let _ = writeln!(out, "{pad}}}");
}

fn print_items(t: &Term, ind: usize, out: &mut String) {
    if t.is_unit() {
        return;
    }
    let items = t.seq_items();
    let n = items.len();
    for (i, it) in items.into_iter().enumerate() {
        let last = i + 1 == n;
        match &it.kind {
            TermKind::LetRec(ds, rest) => {
                if last {
                    for d in ds {
                        print_fun(d, ind, out);
                    }
                    print_items(rest, ind, out);
                } else {
                    let pad = "    ".repeat(ind);
                    let _ = writeln!(out, "{pad}{{");
                    for d in ds {
                        print_fun(d, ind + 1, out);
                    }
                    print_items(rest, ind + 1, out);
                    let _ = writeln!(out, "{pad}}}");
                }
            }
            TermKind::Const(Value::Unit) => {
                let _ = writeln!(out, "{};", "    ".repeat(ind));
            }
            _ => print_stmt(it, ind, out),
        }
    }
}

fn print_braced(t: &Term, ind: usize, out: &mut String) {
    out.push_str("{\n");
    print_items(t, ind + 1, out);
    out.push_str(&"    ".repeat(ind));
    out.push('}');
}

/// One statement at indentation level `ind`, newline-terminated.
pub fn stmt_text(t: &Term, ind: usize) -> String {
    let mut s = String::new();
    print_stmt(t, ind, &mut s);
    s
}

fn print_stmt(t: &Term, ind: usize, out: &mut String) {
    let pad = "    ".repeat(ind);
    out.push_str(&pad);
    match &t.kind {
        TermKind::Assign(x, e) => {
            let _ = write!(out, "{x} = {};", expr_str(e, 0));
        }
        TermKind::SetRef(p, e) => {
            let _ = write!(out, "*{} = {};", expr_str(p, 8), expr_str(e, 0));
        }
        TermKind::If(c, a, b) => {
            let _ = write!(out, "if ({}) ", expr_str(c, 0));
            print_braced(a, ind, out);
            if !b.is_unit() {
                out.push_str(" else ");
                print_braced(b, ind, out);
            }
        }
        TermKind::While(c, b) => {
            let _ = write!(out, "while ({}) ", expr_str(c, 0));
            print_braced(b, ind, out);
        }
        TermKind::Break => out.push_str("break;"),
        TermKind::Goto(l) => {
            let _ = write!(out, "goto {l};");
        }
        TermKind::Labelled(l, b) => {
            let _ = write!(out, "{l}: ");
            print_braced(b, ind, out);
        }
        TermKind::Return(e) => {
            if e.is_unit() {
                out.push_str("return;");
            } else {
                let _ = write!(out, "return {};", expr_str(e, 0));
            }
        }
        TermKind::Seq(..) | TermKind::LetRec(..) => {
            print_braced(t, ind, out);
        }
        TermKind::NativeCall(Builtin::Spawn(f), args) => {
            let _ = write!(out, "spawn {f}({});", args_str(args));
        }
        _ => {
            let _ = write!(out, "{};", expr_str(t, 0));
        }
    }
    out.push('\n');
}

fn args_str(args: &[Term]) -> String {
    args.iter()
        .map(|a| expr_str(a, 0))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Expression rendering; `ctx` is the minimum precedence that may appear
/// without parentheses.
pub fn expr_str(t: &Term, ctx: u8) -> String {
    match &t.kind {
        TermKind::Const(Value::Unit) => "unit".into(),
        TermKind::Const(Value::Int(n)) if *n < 0 => {
            if ctx > 7 {
                format!("({n})")
            } else {
                n.to_string()
            }
        }
        TermKind::Const(Value::Ref(r)) => format!("/* ref {r} */ unit"),
        TermKind::Const(v) => v.to_string(),
        TermKind::Var(x) => x.to_string(),
        TermKind::Call(f, args) => format!("{f}({})", args_str(args)),
        TermKind::AddrOf(x) => format!("&{x}"),
        TermKind::Deref(e) => format!("*{}", expr_str(e, 8)),
        TermKind::NativeCall(b, args) => {
            if let (Some(sym), [l, r]) = (b.binary_symbol(), args.as_slice()) {
                let p = b.precedence();
                let s = format!("{} {sym} {}", expr_str(l, p), expr_str(r, p + 1));
                return if p < ctx { format!("({s})") } else { s };
            }
            match (b, args.as_slice()) {
                (Builtin::Not, [e]) => format!("!{}", expr_str(e, 8)),
                (Builtin::Neg, [e]) => match &e.kind {
                    TermKind::Const(Value::Int(_)) => format!("-({})", expr_str(e, 0)),
                    _ => format!("-{}", expr_str(e, 8)),
                },
                (Builtin::Print(label), _) => {
                    let mut parts = Vec::new();
                    if !label.is_empty() {
                        parts.push(format!("{label:?}"));
                    }
                    parts.extend(args.iter().map(|a| expr_str(a, 0)));
                    format!("print({})", parts.join(", "))
                }
                (Builtin::Spawn(f), _) => format!("({{ spawn {f}({}); }})", args_str(args)),
                _ => format!(
                    "{}({})",
                    b.call_name().unwrap_or("<builtin>"),
                    args_str(args)
                ),
            }
        }
        _ => {
            let mut s = String::from("({\n");
            print_items(t, 1, &mut s);
            s.push_str("})");
            s
        }
    }
}

// ---------------------------------------------------------------------------
// Canonical tree dump

/// One node per line, two-space indentation, fixed field order.
pub fn dump_program(p: &Program) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Program entry={}", p.entry);
    for g in &p.globals {
        let _ = writeln!(out, "  Global {} : {} = {}", g.name, g.ty, g.init);
    }
    for f in &p.funs {
        dump_fun(f, 1, &mut out);
    }
    out
}

pub fn dump_term(t: &Term) -> String {
    let mut out = String::new();
    dump_node(t, 0, &mut out);
    out
}

fn dump_fun(f: &FunDecl, depth: usize, out: &mut String) {
    let pad = "  ".repeat(depth);
    let params: Vec<String> = f.params.iter().map(|p| format!("{}:{}", p.name, p.ty)).collect();
    let locals: Vec<String> = f.locals.iter().map(|p| format!("{}:{}", p.name, p.ty)).collect();
    let _ = writeln!(
        out,
        "{pad}Fun {} {} ret={} params=[{}] locals=[{}]",
        if f.is_cps() { "cps" } else { "native" },
        f.name,
        f.ret,
        params.join(","),
        locals.join(",")
    );
    dump_node(&f.body, depth + 1, out);
}

fn dump_node(t: &Term, depth: usize, out: &mut String) {
    let pad = "  ".repeat(depth);
    let head = match &t.kind {
        TermKind::Const(v) => format!("Const {v}"),
        TermKind::Var(x) => format!("Var {x}"),
        TermKind::Assign(x, _) => format!("Assign {x}"),
        TermKind::Seq(..) => "Seq".into(),
        TermKind::If(..) => "If".into(),
        TermKind::LetRec(ds, _) => {
            let names: Vec<&str> = ds.iter().map(|d| &*d.name).collect();
            format!("LetRec [{}]", names.join(","))
        }
        TermKind::Call(f, args) => format!("Call {f}/{}", args.len()),
        TermKind::Return(_) => "Return".into(),
        TermKind::While(..) => "While".into(),
        TermKind::Break => "Break".into(),
        TermKind::Goto(l) => format!("Goto {l}"),
        TermKind::Labelled(l, _) => format!("Labelled {l}"),
        TermKind::AddrOf(x) => format!("AddrOf {x}"),
        TermKind::Deref(_) => "Deref".into(),
        TermKind::SetRef(..) => "SetRef".into(),
        TermKind::NativeCall(b, args) => format!("NativeCall {b:?}/{}", args.len()),
    };
    let _ = writeln!(out, "{pad}{head}");
    if let TermKind::LetRec(ds, rest) = &t.kind {
        for d in ds {
            dump_fun(d, depth + 1, out);
        }
        dump_node(rest, depth + 1, out);
        return;
    }
    for c in t.children() {
        dump_node(c, depth + 1, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const RUNNING: &str = "cps int f(int rc){ if(rc<0){ yield(); rc=0; } print(rc); return rc; }";

    #[test]
    fn parses_running_example() {
        let p = parse(RUNNING).unwrap();
        assert_eq!(&*p.entry, "f");
        let f = p.fun("f").unwrap();
        assert!(f.is_cps());
        let expect = Term::block(vec![
            Term::if_(
                Term::native(Builtin::Lt, vec![Term::var("rc"), Term::int(0)]),
                Term::block(vec![Term::call("yield", vec![]), Term::assign("rc", Term::int(0))]),
                Term::unit(),
            ),
            Term::native(Builtin::Print(String::new()), vec![Term::var("rc")]),
            Term::ret(Term::var("rc")),
        ]);
        assert_eq!(f.body, expect);
    }

    #[test]
    fn empty_input_has_no_entry() {
        let e = parse("").unwrap_err();
        assert!(e.message.contains("no entry point"));
    }

    #[test]
    fn errors_carry_span_and_expected() {
        let e = parse("cps int f() { return 1 }").unwrap_err();
        assert_eq!(e.span.line, 1);
        assert!(e.expected.contains(&";".to_string()));
    }

    #[test]
    fn listening_loop() {
        let src = r#"
            cps void client(int fd) { print("served ", fd); }
            cps void listening(int socket_fd) {
                int client_fd;
                while (true) {
                    io_wait(socket_fd, 0);
                    client_fd = accept(socket_fd);
                    spawn client(client_fd);
                }
            }"#;
        let p = parse(src).unwrap();
        let l = p.fun("listening").unwrap();
        assert!(l.is_cps());
        assert!(l.body.contains(&|t| matches!(t.kind, TermKind::While(..))));
    }

    #[test]
    fn round_trip_with_nesting_and_labels() {
        let src = r#"
            int g = 3;
            cps int f(int rc) {
                int *p = &rc;
                if (rc < 0) {
                    yield();
                    goto l;
                    l: { rc = 0; goto done; }
                }
                done: { print("rc = ", rc); return -(1) + *p * -2; }
            }
            cps int h(int a) {
                cps void inner(int b) { print(b); }
                inner(a);
                return a;
            }"#;
        let p = parse(src).unwrap().normalize();
        let text = print(&p);
        let q = parse(&text).unwrap().normalize();
        assert_eq!(p, q, "{text}");
        assert!(text.contains("goto l;"));
        assert!(text.contains("l: {"));
        assert!(text.contains("cps void inner(int b) {"));
    }

    #[test]
    fn detached_expands_into_links() {
        let src = "cps int f(int n) { detached { n = n + 1; return n; } return 0; }";
        let p = parse(src).unwrap();
        let f = p.fun("f").unwrap();
        let mut links = 0;
        f.body.walk(&mut |t| {
            if let TermKind::Call(n, _) = &t.kind {
                if &**n == "link" {
                    links += 1;
                }
            }
        });
        // link(pool) at entry, link(s) before the inner return, link(s) at exit.
        assert_eq!(links, 3);
        assert_eq!(f.locals.len(), 2);
    }

    #[test]
    fn dump_is_one_node_per_line() {
        let p = parse("cps int f(int x) { return x + 1; }").unwrap();
        let d = dump_program(&p);
        let lines: Vec<&str> = d.lines().collect();
        assert_eq!(lines[0], "Program entry=f");
        assert!(lines.contains(&"      NativeCall Add/2"));
    }
}
