//! Expressions in `t` and `x1..x9`: parsing, evaluation, symbolic differentiation.
//!
//! Grammar, loosest binding first:
//!
//! ```text
//! sum     := product (('+' | '-') product)*
//! product := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' exponent)?          right-associative
//! atom    := number | 't' | 'x1'..'x9' | 'pi' | func '(' sum ')' | '(' sum ')'
//! func    := 'sin' | 'cos' | 'exp'
//! ```
//!
//! Exponents must reduce to an integer constant in `[-4, 8]`, which keeps the
//! grammar closed under differentiation.

use std::fmt;

use thiserror::Error;

pub const MAX_DEPTH: usize = 64;
pub const MIN_EXPONENT: i32 = -4;
pub const MAX_EXPONENT: i32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    T,
    /// Spatial coordinate `x{k}`, `k` in `1..=9`.
    X(u8),
}

impl Var {
    pub fn parse(name: &str) -> Option<Var> {
        match name {
            "t" => Some(Var::T),
            _ => {
                let digits = name.strip_prefix('x')?;
                match digits.parse::<u8>() {
                    Ok(k @ 1..=9) if digits.len() == 1 => Some(Var::X(k)),
                    _ => None,
                }
            }
        }
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::T => f.write_str("t"),
            Var::X(k) => write!(f, "x{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Exp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    /// Integer power; the exponent lies in `MIN_EXPONENT..=MAX_EXPONENT`.
    Pow(Box<Expr>, i32),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("parse error at byte {position}: {kind}")]
pub struct ParseError {
    pub position: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseErrorKind {
    #[error("unexpected character {0:?}")]
    UnexpectedChar(char),
    #[error("unexpected end of input")]
    UnexpectedEnd,
    #[error("unexpected token {0}")]
    UnexpectedToken(String),
    #[error("unknown identifier {0:?}")]
    UnknownIdentifier(String),
    #[error("malformed number {0:?}")]
    BadNumber(String),
    #[error("exponent must be a constant integer")]
    NonConstantExponent,
    #[error("exponent {0} is not an integer in [{MIN_EXPONENT}, {MAX_EXPONENT}]")]
    BadExponent(f64),
    #[error("expression nesting exceeds {MAX_DEPTH}")]
    TooDeep,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("coordinate {0} missing from evaluation point")]
    MissingCoordinate(Var),
}

// ---------------------------------------------------------------------------
// Construction helpers. These fold the trivial identities produced by the
// differentiation rules so derivative trees stay small.

#[allow(clippy::should_implement_trait)]
impl Expr {
    pub fn constant(value: f64) -> Expr {
        Expr::Const(value)
    }

    pub fn var(v: Var) -> Expr {
        Expr::Var(v)
    }

    pub fn zero() -> Expr {
        Expr::Const(0.0)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    fn is_one(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 1.0)
    }

    pub fn neg(e: Expr) -> Expr {
        match e {
            Expr::Const(c) => Expr::Const(-c),
            Expr::Unary(UnaryOp::Neg, inner) => *inner,
            other => Expr::Unary(UnaryOp::Neg, Box::new(other)),
        }
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        if a.is_zero() {
            return b;
        }
        if b.is_zero() {
            return a;
        }
        if let (Expr::Const(x), Expr::Const(y)) = (&a, &b) {
            return Expr::Const(x + y);
        }
        Expr::Binary(BinaryOp::Add, Box::new(a), Box::new(b))
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        if b.is_zero() {
            return a;
        }
        if a.is_zero() {
            return Expr::neg(b);
        }
        if let (Expr::Const(x), Expr::Const(y)) = (&a, &b) {
            return Expr::Const(x - y);
        }
        Expr::Binary(BinaryOp::Sub, Box::new(a), Box::new(b))
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        if a.is_zero() || b.is_zero() {
            return Expr::zero();
        }
        if a.is_one() {
            return b;
        }
        if b.is_one() {
            return a;
        }
        if let (Expr::Const(x), Expr::Const(y)) = (&a, &b) {
            return Expr::Const(x * y);
        }
        Expr::Binary(BinaryOp::Mul, Box::new(a), Box::new(b))
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        if a.is_zero() && !b.is_zero() {
            return Expr::zero();
        }
        if b.is_one() {
            return a;
        }
        Expr::Binary(BinaryOp::Div, Box::new(a), Box::new(b))
    }

    pub fn pow(base: Expr, exponent: i32) -> Expr {
        debug_assert!((MIN_EXPONENT..=MAX_EXPONENT).contains(&exponent));
        match exponent {
            0 => Expr::Const(1.0),
            1 => base,
            _ => Expr::Pow(Box::new(base), exponent),
        }
    }

    pub fn unary(op: UnaryOp, e: Expr) -> Expr {
        match op {
            UnaryOp::Neg => Expr::neg(e),
            _ => Expr::Unary(op, Box::new(e)),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Var(_) => 1,
            Expr::Unary(_, e) | Expr::Pow(e, _) => 1 + e.depth(),
            Expr::Binary(_, a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    pub fn depends_on(&self, v: Var) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(w) => *w == v,
            Expr::Unary(_, e) | Expr::Pow(e, _) => e.depends_on(v),
            Expr::Binary(_, a, b) => a.depends_on(v) || b.depends_on(v),
        }
    }

    /// Whether any spatial coordinate appears.
    pub fn depends_on_space(&self) -> bool {
        (1..=9).any(|k| self.depends_on(Var::X(k)))
    }

    /// Largest spatial index referenced, or 0 if none.
    pub fn max_axis(&self) -> u8 {
        match self {
            Expr::Const(_) | Expr::Var(Var::T) => 0,
            Expr::Var(Var::X(k)) => *k,
            Expr::Unary(_, e) | Expr::Pow(e, _) => e.max_axis(),
            Expr::Binary(_, a, b) => a.max_axis().max(b.max_axis()),
        }
    }

    /// Returns the value when the tree contains no variables.
    pub fn constant_value(&self) -> Option<f64> {
        if self.depends_on(Var::T) || self.depends_on_space() {
            return None;
        }
        self.eval(0.0, &[]).ok()
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Result<f64, EvalError> {
        Ok(match self {
            Expr::Const(c) => *c,
            Expr::Var(Var::T) => t,
            Expr::Var(Var::X(k)) => *x
                .get(usize::from(*k) - 1)
                .ok_or(EvalError::MissingCoordinate(Var::X(*k)))?,
            Expr::Unary(op, e) => {
                let v = e.eval(t, x)?;
                match op {
                    UnaryOp::Neg => -v,
                    UnaryOp::Sin => v.sin(),
                    UnaryOp::Cos => v.cos(),
                    UnaryOp::Exp => v.exp(),
                }
            }
            Expr::Binary(op, a, b) => {
                let l = a.eval(t, x)?;
                let r = b.eval(t, x)?;
                match op {
                    BinaryOp::Add => l + r,
                    BinaryOp::Sub => l - r,
                    BinaryOp::Mul => l * r,
                    BinaryOp::Div => {
                        if r == 0.0 {
                            return Err(EvalError::DivisionByZero);
                        }
                        l / r
                    }
                }
            }
            Expr::Pow(base, n) => {
                let b = base.eval(t, x)?;
                if *n < 0 && b == 0.0 {
                    return Err(EvalError::DivisionByZero);
                }
                b.powi(*n)
            }
        })
    }

    pub fn differentiate(&self, v: Var) -> Expr {
        match self {
            Expr::Const(_) => Expr::zero(),
            Expr::Var(w) => Expr::Const(if *w == v { 1.0 } else { 0.0 }),
            Expr::Unary(op, e) => {
                let de = e.differentiate(v);
                if de.is_zero() {
                    return Expr::zero();
                }
                let inner = (**e).clone();
                match op {
                    UnaryOp::Neg => Expr::neg(de),
                    UnaryOp::Sin => Expr::mul(Expr::unary(UnaryOp::Cos, inner), de),
                    UnaryOp::Cos => Expr::neg(Expr::mul(Expr::unary(UnaryOp::Sin, inner), de)),
                    UnaryOp::Exp => Expr::mul(self.clone(), de),
                }
            }
            Expr::Binary(op, a, b) => {
                let da = a.differentiate(v);
                let db = b.differentiate(v);
                let (a, b) = ((**a).clone(), (**b).clone());
                match op {
                    BinaryOp::Add => Expr::add(da, db),
                    BinaryOp::Sub => Expr::sub(da, db),
                    BinaryOp::Mul => Expr::add(Expr::mul(da, b), Expr::mul(a, db)),
                    BinaryOp::Div => {
                        // (a/b)' = a'/b - a b' / b^2
                        let first = Expr::div(da, b.clone());
                        let second = Expr::div(Expr::mul(a, db), Expr::pow(b, 2));
                        Expr::sub(first, second)
                    }
                }
            }
            Expr::Pow(base, n) => {
                let db = base.differentiate(v);
                if db.is_zero() {
                    return Expr::zero();
                }
                let lowered = if *n > MIN_EXPONENT {
                    Expr::pow((**base).clone(), n - 1)
                } else {
                    // n = MIN_EXPONENT: b^(n-1) = b^n / b keeps the exponent in range
                    Expr::div(Expr::pow((**base).clone(), *n), (**base).clone())
                };
                Expr::mul(Expr::mul(Expr::Const(f64::from(*n)), lowered), db)
            }
        }
    }

    /// Replaces every occurrence of `v` by `value`.
    pub fn substitute(&self, v: Var, value: &Expr) -> Expr {
        match self {
            Expr::Var(w) if *w == v => value.clone(),
            Expr::Const(_) | Expr::Var(_) => self.clone(),
            Expr::Unary(op, e) => Expr::unary(*op, e.substitute(v, value)),
            Expr::Pow(e, n) => Expr::pow(e.substitute(v, value), *n),
            Expr::Binary(op, a, b) => {
                let (a, b) = (a.substitute(v, value), b.substitute(v, value));
                match op {
                    BinaryOp::Add => Expr::add(a, b),
                    BinaryOp::Sub => Expr::sub(a, b),
                    BinaryOp::Mul => Expr::mul(a, b),
                    BinaryOp::Div => Expr::div(a, b),
                }
            }
        }
    }
}

/// Canonical, fully parenthesised form that [`parse`] reads back.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) => {
                write!(f, "(-{:?})", -c)
            }
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Unary(UnaryOp::Neg, e) => write!(f, "(-{e})"),
            Expr::Unary(op, e) => {
                let name = match op {
                    UnaryOp::Sin => "sin",
                    UnaryOp::Cos => "cos",
                    UnaryOp::Exp => "exp",
                    UnaryOp::Neg => unreachable!(),
                };
                write!(f, "{name}({e})")
            }
            Expr::Binary(op, a, b) => {
                let sym = match op {
                    BinaryOp::Add => '+',
                    BinaryOp::Sub => '-',
                    BinaryOp::Mul => '*',
                    BinaryOp::Div => '/',
                };
                write!(f, "({a}{sym}{b})")
            }
            Expr::Pow(b, n) => write!(f, "({b}^({n}))"),
        }
    }
}

// ---------------------------------------------------------------------------
// Lexer and recursive-descent parser.

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Num(v) => write!(f, "{v}"),
            Token::Ident(s) => write!(f, "{s:?}"),
            Token::Plus => f.write_str("'+'"),
            Token::Minus => f.write_str("'-'"),
            Token::Star => f.write_str("'*'"),
            Token::Slash => f.write_str("'/'"),
            Token::Caret => f.write_str("'^'"),
            Token::LParen => f.write_str("'('"),
            Token::RParen => f.write_str("')'"),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(usize, Token)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let simple = match c {
            b'+' => Some(Token::Plus),
            b'-' => Some(Token::Minus),
            b'*' => Some(Token::Star),
            b'/' => Some(Token::Slash),
            b'^' => Some(Token::Caret),
            b'(' => Some(Token::LParen),
            b')' => Some(Token::RParen),
            _ => None,
        };
        if let Some(tok) = simple {
            out.push((start, tok));
            i += 1;
        } else if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == b'.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text = &src[start..i];
            let value: f64 = text.parse().map_err(|_| ParseError {
                position: start,
                kind: ParseErrorKind::BadNumber(text.to_string()),
            })?;
            if !value.is_finite() {
                return Err(ParseError {
                    position: start,
                    kind: ParseErrorKind::BadNumber(text.to_string()),
                });
            }
            out.push((start, Token::Num(value)));
        } else if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((start, Token::Ident(src[start..i].to_string())));
        } else {
            let ch = src[start..].chars().next().unwrap_or('?');
            return Err(ParseError {
                position: start,
                kind: ParseErrorKind::UnexpectedChar(ch),
            });
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    end: usize,
    depth: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn here(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.end, |(p, _)| *p)
    }

    fn err(&self, kind: ParseErrorKind) -> ParseError {
        ParseError {
            position: self.here(),
            kind,
        }
    }

    fn enter(&mut self) -> Result<(), ParseError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(self.err(ParseErrorKind::TooDeep));
        }
        Ok(())
    }

    fn expect(&mut self, tok: Token) -> Result<(), ParseError> {
        match self.peek() {
            Some(t) if *t == tok => {
                self.pos += 1;
                Ok(())
            }
            Some(t) => Err(self.err(ParseErrorKind::UnexpectedToken(t.to_string()))),
            None => Err(self.err(ParseErrorKind::UnexpectedEnd)),
        }
    }

    fn sum(&mut self) -> Result<Expr, ParseError> {
        self.enter()?;
        let mut lhs = self.product()?;
        loop {
            let op = match self.peek() {
                Some(Token::Plus) => BinaryOp::Add,
                Some(Token::Minus) => BinaryOp::Sub,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.product()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        self.depth -= 1;
        Ok(lhs)
    }

    fn product(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(Token::Star) => BinaryOp::Mul,
                Some(Token::Slash) => BinaryOp::Div,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek() == Some(&Token::Minus) {
            self.pos += 1;
            self.enter()?;
            let e = Expr::Unary(UnaryOp::Neg, Box::new(self.unary()?));
            self.depth -= 1;
            Ok(e)
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        let e = if self.peek() == Some(&Token::Caret) {
            self.pos += 1;
            let at = self.here();
            // Right-associative; the exponent may carry its own sign.
            let exponent = self.unary()?;
            let value = exponent.constant_value().ok_or(ParseError {
                position: at,
                kind: ParseErrorKind::NonConstantExponent,
            })?;
            let in_range = value.fract() == 0.0 && value >= f64::from(MIN_EXPONENT) && value <= f64::from(MAX_EXPONENT);
            if !in_range {
                return Err(ParseError {
                    position: at,
                    kind: ParseErrorKind::BadExponent(value),
                });
            }
            Expr::Pow(Box::new(base), value as i32)
        } else {
            base
        };
        Ok(e)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let at = self.here();
        let Some((_, tok)) = self.tokens.get(self.pos).cloned() else {
            return Err(self.err(ParseErrorKind::UnexpectedEnd));
        };
        self.pos += 1;
        match tok {
            Token::Num(v) => Ok(Expr::Const(v)),
            Token::LParen => {
                let e = self.sum()?;
                self.expect(Token::RParen)?;
                Ok(e)
            }
            Token::Ident(name) => {
                let func = match name.as_str() {
                    "sin" => Some(UnaryOp::Sin),
                    "cos" => Some(UnaryOp::Cos),
                    "exp" => Some(UnaryOp::Exp),
                    _ => None,
                };
                if let Some(op) = func {
                    self.enter()?;
                    self.expect(Token::LParen)?;
                    let arg = self.sum()?;
                    self.expect(Token::RParen)?;
                    self.depth -= 1;
                    return Ok(Expr::Unary(op, Box::new(arg)));
                }
                if name == "pi" {
                    return Ok(Expr::Const(std::f64::consts::PI));
                }
                Var::parse(&name).map(Expr::Var).ok_or(ParseError {
                    position: at,
                    kind: ParseErrorKind::UnknownIdentifier(name),
                })
            }
            other => {
                self.pos -= 1;
                Err(self.err(ParseErrorKind::UnexpectedToken(other.to_string())))
            }
        }
    }
}

pub fn parse(source: &str) -> Result<Expr, ParseError> {
    let tokens = lex(source)?;
    let mut p = Parser {
        tokens,
        pos: 0,
        end: source.len(),
        depth: 0,
    };
    let e = p.sum()?;
    if let Some(t) = p.peek() {
        return Err(p.err(ParseErrorKind::UnexpectedToken(t.to_string())));
    }
    if e.depth() > MAX_DEPTH {
        return Err(ParseError {
            position: 0,
            kind: ParseErrorKind::TooDeep,
        });
    }
    Ok(e)
}

impl std::str::FromStr for Expr {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}
