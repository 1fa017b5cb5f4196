//! Expression DSL for scalar and vector fields.
//!
//! Grammar (LL(1) recursive descent, no implicit multiplication):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' integer)*
//! atom   := number | 'x'<index> | func '(' expr ')' | '(' expr ')'
//! func   := sin | cos | tan | exp | log | sqrt
//! ```
//!
//! Precedence is `^` > unary `-` > `*` `/` > `+` `-`. Variables are
//! 1-indexed `x1 .. xn` to match the usual state-vector subscripting.
//! Exponents are integer literals. Division by zero is an evaluation
//! concern, not a parse error.

use crate::jet::{jet_space, Jet, JetSpace};
use crate::vectorfield::{ScalarField, ScalarProgram, VectorField};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }
}

/// Expression tree over variables `x1..xn`. Variable indices are stored
/// 0-based.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Call(Func, Box<Expr>),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DslError {
    #[error("exprdsl: parse error at byte {offset}: found {found}, expected {}", expected.join(", "))]
    Parse {
        offset: usize,
        found: String,
        expected: Vec<&'static str>,
    },
    #[error("exprdsl: unknown variable x{index} at byte {offset} (arity is {arity})")]
    UnknownVariable {
        offset: usize,
        index: usize,
        arity: usize,
    },
    #[error("exprdsl: component {component}: {source}")]
    Component {
        component: usize,
        source: Box<DslError>,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("identifier '{s}'"),
            Tok::Plus => "'+'".into(),
            Tok::Minus => "'-'".into(),
            Tok::Star => "'*'".into(),
            Tok::Slash => "'/'".into(),
            Tok::Caret => "'^'".into(),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn next(&mut self) -> Result<(usize, Tok), DslError> {
        self.skip_ws();
        let start = self.pos;
        if self.pos >= self.src.len() {
            return Ok((start, Tok::Eof));
        }
        let b = self.src[self.pos];
        let tok = match b {
            b'+' => {
                self.pos += 1;
                Tok::Plus
            }
            b'-' => {
                self.pos += 1;
                Tok::Minus
            }
            b'*' => {
                self.pos += 1;
                Tok::Star
            }
            b'/' => {
                self.pos += 1;
                Tok::Slash
            }
            b'^' => {
                self.pos += 1;
                Tok::Caret
            }
            b'(' => {
                self.pos += 1;
                Tok::LParen
            }
            b')' => {
                self.pos += 1;
                Tok::RParen
            }
            b'0'..=b'9' => {
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
                if self.pos < self.src.len() && self.src[self.pos] == b'.' {
                    self.pos += 1;
                    while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                        self.pos += 1;
                    }
                }
                if self.pos < self.src.len() && (self.src[self.pos] | 0x20) == b'e' {
                    let mark = self.pos;
                    self.pos += 1;
                    if self.pos < self.src.len()
                        && (self.src[self.pos] == b'+' || self.src[self.pos] == b'-')
                    {
                        self.pos += 1;
                    }
                    if self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                            self.pos += 1;
                        }
                    } else {
                        self.pos = mark; // bare 'e' is not an exponent
                    }
                }
                let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                let v: f64 = text.parse().map_err(|_| DslError::Parse {
                    offset: start,
                    found: text.to_string(),
                    expected: vec!["number"],
                })?;
                Tok::Num(v)
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                while self.pos < self.src.len()
                    && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                Tok::Ident(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
            }
            other => {
                return Err(DslError::Parse {
                    offset: start,
                    found: format!("'{}'", other as char),
                    expected: vec!["token"],
                })
            }
        };
        Ok((start, tok))
    }
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
    arity: usize,
}

const ATOM_EXPECTED: &[&str] = &["number", "variable", "function", "'('", "'-'"];

impl Parser {
    fn peek(&self) -> &(usize, Tok) {
        &self.toks[self.at]
    }

    fn bump(&mut self) -> (usize, Tok) {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn error(&self, expected: &[&'static str]) -> DslError {
        let (offset, tok) = self.peek();
        DslError::Parse {
            offset: *offset,
            found: tok.describe(),
            expected: expected.to_vec(),
        }
    }

    fn expr(&mut self) -> Result<Expr, DslError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek().1 {
                Tok::Plus => {
                    self.bump();
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Tok::Minus => {
                    self.bump();
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, DslError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek().1 {
                Tok::Star => {
                    self.bump();
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Tok::Slash => {
                    self.bump();
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, DslError> {
        if matches!(self.peek().1, Tok::Minus) {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, DslError> {
        let mut base = self.atom()?;
        while matches!(self.peek().1, Tok::Caret) {
            self.bump();
            let negate = if matches!(self.peek().1, Tok::Minus) {
                self.bump();
                true
            } else {
                false
            };
            let (offset, tok) = self.bump();
            let exp = match tok {
                Tok::Num(v) if v.fract() == 0.0 && v.abs() <= i32::MAX as f64 => v as i32,
                other => {
                    return Err(DslError::Parse {
                        offset,
                        found: other.describe(),
                        expected: vec!["integer exponent"],
                    })
                }
            };
            base = Expr::Pow(Box::new(base), if negate { -exp } else { exp });
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, DslError> {
        let (offset, tok) = self.peek().clone();
        match tok {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Const(v))
            }
            Tok::LParen => {
                self.bump();
                let inner = self.expr()?;
                if !matches!(self.peek().1, Tok::RParen) {
                    return Err(self.error(&["')'"]));
                }
                self.bump();
                Ok(inner)
            }
            Tok::Ident(name) => {
                self.bump();
                if let Some(func) = Func::from_name(&name) {
                    if !matches!(self.peek().1, Tok::LParen) {
                        return Err(self.error(&["'('"]));
                    }
                    self.bump();
                    let arg = self.expr()?;
                    if !matches!(self.peek().1, Tok::RParen) {
                        return Err(self.error(&["')'"]));
                    }
                    self.bump();
                    return Ok(Expr::Call(func, Box::new(arg)));
                }
                if let Some(rest) = name.strip_prefix('x') {
                    if let Ok(index) = rest.parse::<usize>() {
                        if index == 0 || index > self.arity {
                            return Err(DslError::UnknownVariable {
                                offset,
                                index,
                                arity: self.arity,
                            });
                        }
                        return Ok(Expr::Var(index - 1));
                    }
                }
                Err(DslError::Parse {
                    offset,
                    found: format!("identifier '{name}'"),
                    expected: vec!["variable", "function"],
                })
            }
            _ => Err(self.error(ATOM_EXPECTED)),
        }
    }
}

/// Parse an expression over `x1..xn`.
pub fn parse_expr(src: &str, arity: usize) -> Result<Expr, DslError> {
    let mut lexer = Lexer::new(src);
    let mut toks = Vec::new();
    loop {
        let t = lexer.next()?;
        let done = matches!(t.1, Tok::Eof);
        toks.push(t);
        if done {
            break;
        }
    }
    let mut parser = Parser { toks, at: 0, arity };
    let expr = parser.expr()?;
    if !matches!(parser.peek().1, Tok::Eof) {
        return Err(parser.error(&["operator", "end of input"]));
    }
    Ok(expr)
}

impl Expr {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Const(v) => *v,
            Expr::Var(i) => x[*i],
            Expr::Neg(a) => -a.eval(x),
            Expr::Add(a, b) => a.eval(x) + b.eval(x),
            Expr::Sub(a, b) => a.eval(x) - b.eval(x),
            Expr::Mul(a, b) => a.eval(x) * b.eval(x),
            Expr::Div(a, b) => a.eval(x) / b.eval(x),
            Expr::Pow(a, k) => a.eval(x).powi(*k),
            Expr::Call(f, a) => {
                let v = a.eval(x);
                match f {
                    Func::Sin => v.sin(),
                    Func::Cos => v.cos(),
                    Func::Tan => v.tan(),
                    Func::Exp => v.exp(),
                    Func::Log => v.ln(),
                    Func::Sqrt => v.sqrt(),
                }
            }
        }
    }

    pub fn eval_jet(&self, space: &Arc<JetSpace>, xs: &[Jet]) -> Jet {
        match self {
            Expr::Const(v) => Jet::constant(space, *v),
            Expr::Var(i) => xs[*i].clone(),
            Expr::Neg(a) => -a.eval_jet(space, xs),
            Expr::Add(a, b) => a.eval_jet(space, xs) + b.eval_jet(space, xs),
            Expr::Sub(a, b) => a.eval_jet(space, xs) - b.eval_jet(space, xs),
            Expr::Mul(a, b) => a.eval_jet(space, xs) * b.eval_jet(space, xs),
            Expr::Div(a, b) => a.eval_jet(space, xs) / b.eval_jet(space, xs),
            Expr::Pow(a, k) => a.eval_jet(space, xs).powi(*k),
            Expr::Call(f, a) => {
                let v = a.eval_jet(space, xs);
                match f {
                    Func::Sin => v.sin(),
                    Func::Cos => v.cos(),
                    Func::Tan => v.tan(),
                    Func::Exp => v.exp(),
                    Func::Log => v.ln(),
                    Func::Sqrt => v.sqrt(),
                }
            }
        }
    }

    pub fn free_vars(&self) -> Vec<usize> {
        let mut vars = Vec::new();
        self.collect_vars(&mut vars);
        vars.sort_unstable();
        vars.dedup();
        vars
    }

    fn collect_vars(&self, out: &mut Vec<usize>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(i) => out.push(*i),
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.collect_vars(out),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(..) => 3,
            Expr::Pow(..) => 4,
            Expr::Const(_) | Expr::Var(_) | Expr::Call(..) => 5,
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        let prec = self.precedence();
        let parens = prec < min;
        if parens {
            write!(f, "(")?;
        }
        match self {
            Expr::Const(v) => write!(f, "{v:?}")?,
            Expr::Var(i) => write!(f, "x{}", i + 1)?,
            Expr::Neg(a) => {
                write!(f, "-")?;
                a.fmt_prec(f, prec + 1)?;
            }
            Expr::Add(a, b) => {
                a.fmt_prec(f, prec)?;
                write!(f, " + ")?;
                b.fmt_prec(f, prec + 1)?;
            }
            Expr::Sub(a, b) => {
                a.fmt_prec(f, prec)?;
                write!(f, " - ")?;
                b.fmt_prec(f, prec + 1)?;
            }
            Expr::Mul(a, b) => {
                a.fmt_prec(f, prec)?;
                write!(f, "*")?;
                b.fmt_prec(f, prec + 1)?;
            }
            Expr::Div(a, b) => {
                a.fmt_prec(f, prec)?;
                write!(f, "/")?;
                b.fmt_prec(f, prec + 1)?;
            }
            Expr::Pow(a, k) => {
                a.fmt_prec(f, prec + 1)?;
                write!(f, "^{k}")?;
            }
            Expr::Call(func, a) => {
                write!(f, "{}(", func.name())?;
                a.fmt_prec(f, 0)?;
                write!(f, ")")?;
            }
        }
        if parens {
            write!(f, ")")?;
        }
        Ok(())
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

#[derive(Debug)]
struct AstProgram {
    expr: Expr,
    arity: usize,
}

impl ScalarProgram for AstProgram {
    fn arity(&self) -> usize {
        self.arity
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.expr.eval(x)
    }

    fn taylor(&self, order: usize, x: &[f64]) -> Jet {
        let space = jet_space(self.arity, order);
        let seeds: Vec<Jet> = (0..self.arity)
            .map(|v| Jet::variable(&space, v, x[v]))
            .collect();
        self.expr.eval_jet(&space, &seeds)
    }

    fn describe(&self) -> String {
        self.expr.to_string()
    }
}

/// Parse a scalar field over `x1..xn`.
pub fn parse_scalar(src: &str, arity: usize) -> Result<ScalarField, DslError> {
    let expr = parse_expr(src, arity)?;
    Ok(ScalarField::from_program(Arc::new(AstProgram {
        expr,
        arity,
    })))
}

/// Parse a vector field from one expression per component. The component
/// count fixes the arity: fields here map `R^n -> R^n`.
pub fn parse_vector(srcs: &[String], arity: usize) -> Result<VectorField, DslError> {
    let comps = srcs
        .iter()
        .enumerate()
        .map(|(i, src)| {
            parse_scalar(src, arity).map_err(|source| DslError::Component {
                component: i + 1,
                source: Box::new(source),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(VectorField::new(comps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_output_expression() {
        let h1 = parse_scalar("x1 - x5", 5).unwrap();
        assert_eq!(h1.eval(&[2.0, 0.0, 0.0, 0.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn constant_zero() {
        let z = parse_scalar("0", 3).unwrap();
        assert_eq!(z.eval(&[5.0, 6.0, 7.0]).unwrap(), 0.0);
    }

    #[test]
    fn cosine_at_origin() {
        let g = parse_scalar("cos(x1 - x5)", 5).unwrap();
        assert_eq!(g.eval(&[0.0; 5]).unwrap(), 1.0);
    }

    #[test]
    fn vector_field_from_strings() {
        let f = parse_vector(
            &[
                "x2 + x2^2".into(),
                "x3 - x1*x4 + x4*x5".into(),
                "x2*x4 + x1*x5 - x5^2".into(),
                "x5".into(),
                "x2^2".into(),
            ],
            5,
        )
        .unwrap();
        assert_eq!(f.eval(&[0.0; 5]).unwrap(), vec![0.0; 5]);
        let v = f.eval(&[0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(v[0], 2.0);
    }

    #[test]
    fn rejects_dangling_operator_with_offset() {
        let err = parse_expr("1 + * 2", 2).unwrap_err();
        match err {
            DslError::Parse { offset, .. } => assert_eq!(offset, 4),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_implicit_multiplication() {
        assert!(parse_expr("2 x1", 2).is_err());
    }

    #[test]
    fn rejects_out_of_range_variable() {
        let err = parse_expr("x1 + x7", 5).unwrap_err();
        match err {
            DslError::UnknownVariable { index, arity, .. } => {
                assert_eq!(index, 7);
                assert_eq!(arity, 5);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn precedence_matches_convention() {
        // ^ binds tighter than unary minus: -x^2 is -(x^2)
        let e = parse_expr("-x1^2", 1).unwrap();
        assert_eq!(e.eval(&[3.0]), -9.0);
        let e = parse_expr("2 + 3*4^2", 1).unwrap();
        assert_eq!(e.eval(&[0.0]), 50.0);
        let e = parse_expr("x1^-2", 1).unwrap();
        assert_eq!(e.eval(&[2.0]), 0.25);
    }

    #[test]
    fn jet_derivatives_of_polynomials_are_exact() {
        let f = parse_scalar("x1^3", 1).unwrap();
        let jet = f.taylor(1, &[2.0]);
        assert_eq!(jet.gradient()[0], 12.0);
    }

    #[test]
    fn display_round_trip_spot_checks() {
        for src in [
            "x1 - x5",
            "x2 + x2^2",
            "cos(x1 - x5)",
            "-(x1 + x2)*x3",
            "x1/x2/x3",
            "1.5e-3*sqrt(x1 + 2.0)",
            "x1^-2 + (x2 - 1.0)^3",
        ] {
            let ast = parse_expr(src, 5).unwrap();
            let printed = ast.to_string();
            let reparsed = parse_expr(&printed, 5).unwrap();
            assert_eq!(ast, reparsed, "src {src:?} printed {printed:?}");
        }
    }
}
