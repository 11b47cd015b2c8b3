//! Scalar math expressions over named state variables.
//!
//! Grammar (standard infix precedence, `^` binds tightest and is
//! right-associative):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?
//! primary := number | ident | ident '(' expr ')' | '(' expr ')'
//! ident   := [A-Za-z_][A-Za-z0-9_]*
//! number  := digits ('.' digits?)? (('e' | 'E') ('+' | '-')? digits)?
//! ```
//!
//! Functions: `sin`, `cos`, `tan`, `exp`, `abs`. Identifiers resolve to a
//! state variable, then a configured constant, then the builtin `pi`.
//! Exponents must fold to a non-negative integer.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::dual::Dual;
use crate::interval::Interval;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("exponent at offset {offset} is not a non-negative integer")]
    NonIntegerExponent { offset: usize },
    #[error("`{name}` is declared both as a variable and a constant")]
    AmbiguousName { name: String },
    #[error("division by zero")]
    DivisionByZero,
    #[error("interval enclosure failed: {0}")]
    EnclosureFailure(&'static str),
    #[error("expected {expected} variables, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Tan,
    Exp,
    Abs,
}

impl UnaryOp {
    fn from_name(name: &str) -> Option<UnaryOp> {
        Some(match name {
            "sin" => UnaryOp::Sin,
            "cos" => UnaryOp::Cos,
            "tan" => UnaryOp::Tan,
            "exp" => UnaryOp::Exp,
            "abs" => UnaryOp::Abs,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "-",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Tan => "tan",
            UnaryOp::Exp => "exp",
            UnaryOp::Abs => "abs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    pub fn symbol(self) -> char {
        match self {
            BinaryOp::Add => '+',
            BinaryOp::Sub => '-',
            BinaryOp::Mul => '*',
            BinaryOp::Div => '/',
        }
    }
}

/// Expression tree. Variables are indices into the owning system's state
/// vector; named constants are folded into literals at parse time.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Lit(f64),
    Var(usize),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, u32),
}

/// Parses `source` against the declared `variables` and `constants`.
pub fn parse(
    source: &str,
    variables: &[String],
    constants: &BTreeMap<String, f64>,
) -> Result<Expr, ExprError> {
    for v in variables {
        if constants.contains_key(v) {
            return Err(ExprError::AmbiguousName { name: v.clone() });
        }
    }
    let tokens = tokenize(source)?;
    let mut p = Parser {
        tokens,
        pos: 0,
        variables,
        constants,
        len: source.len(),
    };
    let e = p.expr()?;
    if let Some(t) = p.peek() {
        return Err(ExprError::Syntax {
            offset: t.offset,
            message: format!("unexpected {}", t.kind),
        });
    }
    Ok(e)
}

impl Expr {
    /// Highest variable index referenced, plus one.
    pub fn arity(&self) -> usize {
        match self {
            Expr::Lit(_) => 0,
            Expr::Var(i) => i + 1,
            Expr::Unary(_, a) | Expr::Pow(a, _) => a.arity(),
            Expr::Binary(_, a, b) => a.arity().max(b.arity()),
        }
    }

    /// IEEE double evaluation at a point.
    pub fn eval_point(&self, x: &[f64]) -> Result<f64, ExprError> {
        Ok(match self {
            Expr::Lit(c) => *c,
            Expr::Var(i) => *x.get(*i).ok_or(ExprError::DimensionMismatch {
                expected: i + 1,
                got: x.len(),
            })?,
            Expr::Unary(op, a) => {
                let a = a.eval_point(x)?;
                match op {
                    UnaryOp::Neg => -a,
                    UnaryOp::Sin => a.sin(),
                    UnaryOp::Cos => a.cos(),
                    UnaryOp::Tan => a.tan(),
                    UnaryOp::Exp => a.exp(),
                    UnaryOp::Abs => a.abs(),
                }
            }
            Expr::Binary(op, a, b) => {
                let a = a.eval_point(x)?;
                let b = b.eval_point(x)?;
                match op {
                    BinaryOp::Add => a + b,
                    BinaryOp::Sub => a - b,
                    BinaryOp::Mul => a * b,
                    BinaryOp::Div => {
                        if b == 0.0 {
                            return Err(ExprError::DivisionByZero);
                        }
                        a / b
                    }
                }
            }
            Expr::Pow(a, n) => powi_point(a.eval_point(x)?, *n),
        })
    }

    /// Enclosure of the expression's range over a box.
    pub fn eval_interval(&self, b: &[Interval]) -> Result<Interval, ExprError> {
        let r = self.eval_interval_inner(b)?;
        if !r.is_finite() {
            return Err(ExprError::EnclosureFailure("overflow"));
        }
        Ok(r)
    }

    fn eval_interval_inner(&self, b: &[Interval]) -> Result<Interval, ExprError> {
        Ok(match self {
            Expr::Lit(c) => Interval::point(*c),
            Expr::Var(i) => *b.get(*i).ok_or(ExprError::DimensionMismatch {
                expected: i + 1,
                got: b.len(),
            })?,
            Expr::Unary(op, a) => {
                let a = a.eval_interval_inner(b)?;
                match op {
                    UnaryOp::Neg => -a,
                    UnaryOp::Sin => a.sin(),
                    UnaryOp::Cos => a.cos(),
                    UnaryOp::Tan => a
                        .checked_tan()
                        .ok_or(ExprError::EnclosureFailure("tan argument reaches a pole"))?,
                    UnaryOp::Exp => a.exp(),
                    UnaryOp::Abs => a.abs(),
                }
            }
            Expr::Binary(op, l, r) => {
                let l = l.eval_interval_inner(b)?;
                let r = r.eval_interval_inner(b)?;
                match op {
                    BinaryOp::Add => l + r,
                    BinaryOp::Sub => l - r,
                    BinaryOp::Mul => l * r,
                    BinaryOp::Div => l
                        .checked_div(r)
                        .ok_or(ExprError::EnclosureFailure("divisor interval contains zero"))?,
                }
            }
            Expr::Pow(a, n) => a.eval_interval_inner(b)?.powi(*n),
        })
    }

    /// Value and gradient enclosures over the box the duals were seeded on.
    pub fn eval_dual(&self, x: &[Dual]) -> Result<Dual, ExprError> {
        let r = self.eval_dual_inner(x)?;
        if !r.is_finite() {
            return Err(ExprError::EnclosureFailure("overflow"));
        }
        Ok(r)
    }

    fn eval_dual_inner(&self, x: &[Dual]) -> Result<Dual, ExprError> {
        let n = x.first().map_or(0, |d| d.grad.len());
        Ok(match self {
            Expr::Lit(c) => Dual::constant(Interval::point(*c), n),
            Expr::Var(i) => x
                .get(*i)
                .ok_or(ExprError::DimensionMismatch {
                    expected: i + 1,
                    got: x.len(),
                })?
                .clone(),
            Expr::Unary(op, a) => {
                let a = a.eval_dual_inner(x)?;
                match op {
                    UnaryOp::Neg => -a,
                    UnaryOp::Sin => a.sin(),
                    UnaryOp::Cos => a.cos(),
                    UnaryOp::Tan => a
                        .checked_tan()
                        .ok_or(ExprError::EnclosureFailure("tan argument reaches a pole"))?,
                    UnaryOp::Exp => a.exp(),
                    UnaryOp::Abs => a.abs(),
                }
            }
            Expr::Binary(op, l, r) => {
                let l = l.eval_dual_inner(x)?;
                let r = r.eval_dual_inner(x)?;
                match op {
                    BinaryOp::Add => l + r,
                    BinaryOp::Sub => l - r,
                    BinaryOp::Mul => l * r,
                    BinaryOp::Div => l
                        .checked_div(r)
                        .ok_or(ExprError::EnclosureFailure("divisor interval contains zero"))?,
                }
            }
            Expr::Pow(a, k) => a.eval_dual_inner(x)?.powi(*k),
        })
    }

    /// Writes the expression with explicit parentheses using the given
    /// variable names. The output reparses to an identical tree.
    pub fn display<'a>(&'a self, names: &'a [String]) -> impl fmt::Display + 'a {
        DisplayExpr { expr: self, names }
    }
}

/// Repeated multiplication, mirroring the interval power so that point values
/// of a degenerate box always land inside its enclosure.
pub fn powi_point(x: f64, n: u32) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let mut acc = x;
    for _ in 1..n {
        acc *= x;
    }
    acc
}

struct DisplayExpr<'a> {
    expr: &'a Expr,
    names: &'a [String],
}

impl<'a> fmt::Display for DisplayExpr<'a> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sub = |e: &'a Expr| DisplayExpr {
            expr: e,
            names: self.names,
        };
        match self.expr {
            Expr::Lit(c) if *c < 0.0 => write!(f, "(-{})", -c),
            Expr::Lit(c) => write!(f, "{c}"),
            Expr::Var(i) => match self.names.get(*i) {
                Some(n) => write!(f, "{n}"),
                None => write!(f, "x{}", i + 1),
            },
            Expr::Unary(UnaryOp::Neg, a) => write!(f, "(-{})", sub(a)),
            Expr::Unary(op, a) => write!(f, "{}({})", op.name(), sub(a)),
            Expr::Binary(op, a, b) => write!(f, "({} {} {})", sub(a), op.symbol(), sub(b)),
            Expr::Pow(a, n) => write!(f, "({}^{n})", sub(a)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenKind::Num(v) => write!(f, "number {v}"),
            TokenKind::Ident(s) => write!(f, "identifier `{s}`"),
            TokenKind::Op(c) => write!(f, "`{c}`"),
            TokenKind::LParen => write!(f, "`(`"),
            TokenKind::RParen => write!(f, "`)`"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    offset: usize,
}

fn tokenize(src: &str) -> Result<Vec<Token>, ExprError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let kind = match c {
            '+' | '-' | '*' | '/' | '^' => {
                i += 1;
                TokenKind::Op(c)
            }
            '(' => {
                i += 1;
                TokenKind::LParen
            }
            ')' => {
                i += 1;
                TokenKind::RParen
            }
            '0'..='9' | '.' => {
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
                let v: f64 = text.parse().map_err(|_| ExprError::Syntax {
                    offset: start,
                    message: format!("malformed number `{text}`"),
                })?;
                TokenKind::Num(v)
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                TokenKind::Ident(src[start..i].to_string())
            }
            other => {
                return Err(ExprError::Syntax {
                    offset: start,
                    message: format!("unexpected character `{other}`"),
                })
            }
        };
        out.push(Token {
            kind,
            offset: start,
        });
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    variables: &'a [String],
    constants: &'a BTreeMap<String, f64>,
    len: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn peek_op(&self) -> Option<char> {
        match self.peek() {
            Some(Token {
                kind: TokenKind::Op(c),
                ..
            }) => Some(*c),
            _ => None,
        }
    }

    fn offset(&self) -> usize {
        self.peek().map_or(self.len, |t| t.offset)
    }

    fn syntax(&self, message: impl Into<String>) -> ExprError {
        ExprError::Syntax {
            offset: self.offset(),
            message: message.into(),
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        while let Some(c @ ('+' | '-')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.term()?;
            let op = if c == '+' { BinaryOp::Add } else { BinaryOp::Sub };
            lhs = fold_binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(c @ ('*' | '/')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.unary()?;
            let op = if c == '*' { BinaryOp::Mul } else { BinaryOp::Div };
            lhs = fold_binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.peek_op() == Some('-') {
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(match inner {
                Expr::Lit(c) => Expr::Lit(-c),
                e => Expr::Unary(UnaryOp::Neg, Box::new(e)),
            });
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.primary()?;
        if self.peek_op() != Some('^') {
            return Ok(base);
        }
        self.pos += 1;
        let exp_offset = self.offset();
        let exponent = self.unary()?;
        let n = match exponent {
            Expr::Lit(v) if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 => v as u32,
            _ => return Err(ExprError::NonIntegerExponent { offset: exp_offset }),
        };
        Ok(match base {
            Expr::Lit(c) => Expr::Lit(powi_point(c, n)),
            e => Expr::Pow(Box::new(e), n),
        })
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        let Some(tok) = self.peek().cloned() else {
            return Err(self.syntax("unexpected end of input"));
        };
        match tok.kind {
            TokenKind::Num(v) => {
                self.pos += 1;
                Ok(Expr::Lit(v))
            }
            TokenKind::LParen => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect_rparen()?;
                Ok(e)
            }
            TokenKind::Ident(name) => {
                self.pos += 1;
                if matches!(
                    self.peek(),
                    Some(Token {
                        kind: TokenKind::LParen,
                        ..
                    })
                ) {
                    let op = UnaryOp::from_name(&name).ok_or_else(|| {
                        ExprError::UnknownIdentifier {
                            name: name.clone(),
                            offset: tok.offset,
                        }
                    })?;
                    self.pos += 1;
                    let arg = self.expr()?;
                    self.expect_rparen()?;
                    return Ok(fold_unary(op, arg));
                }
                if let Some(i) = self.variables.iter().position(|v| *v == name) {
                    Ok(Expr::Var(i))
                } else if let Some(c) = self.constants.get(&name) {
                    Ok(Expr::Lit(*c))
                } else if name == "pi" {
                    Ok(Expr::Lit(std::f64::consts::PI))
                } else {
                    Err(ExprError::UnknownIdentifier {
                        name,
                        offset: tok.offset,
                    })
                }
            }
            other => Err(ExprError::Syntax {
                offset: tok.offset,
                message: format!("expected operand, found {other}"),
            }),
        }
    }

    fn expect_rparen(&mut self) -> Result<(), ExprError> {
        match self.peek() {
            Some(Token {
                kind: TokenKind::RParen,
                ..
            }) => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.syntax("expected `)`")),
        }
    }
}

fn fold_unary(op: UnaryOp, a: Expr) -> Expr {
    if let Expr::Lit(c) = a {
        let e = Expr::Unary(op, Box::new(Expr::Lit(c)));
        if let Ok(v) = e.eval_point(&[]) {
            if v.is_finite() {
                return Expr::Lit(v);
            }
        }
        return e;
    }
    Expr::Unary(op, Box::new(a))
}

fn fold_binary(op: BinaryOp, a: Expr, b: Expr) -> Expr {
    let e = Expr::Binary(op, Box::new(a), Box::new(b));
    if let Expr::Binary(_, l, r) = &e {
        if matches!((&**l, &**r), (Expr::Lit(_), Expr::Lit(_))) {
            if let Ok(v) = e.eval_point(&[]) {
                if v.is_finite() {
                    return Expr::Lit(v);
                }
            }
        }
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn vars(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn p(src: &str, names: &[&str]) -> Expr {
        parse(src, &vars(names), &BTreeMap::new()).unwrap()
    }

    fn iv(lo: f64, hi: f64) -> Interval {
        Interval::new(lo, hi).unwrap()
    }

    #[test]
    fn polynomial_mode_dynamics() {
        let e = p("-s + 2*s^2*v", &["s", "v"]);
        assert_eq!(e.eval_point(&[1.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn zero_expression() {
        let e = p("0", &["s", "v"]);
        assert_eq!(e, Expr::Lit(0.0));
        assert_eq!(e.eval_point(&[3.0, -2.0]).unwrap(), 0.0);
    }

    #[test]
    fn malformed_input_reports_offset() {
        let err = parse("x*+2", &vars(&["x"]), &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, ExprError::Syntax { offset: 2, .. }), "{err:?}");
    }

    #[test]
    fn other_errors() {
        let none = BTreeMap::new();
        assert!(matches!(
            parse("y + 1", &vars(&["x"]), &none),
            Err(ExprError::UnknownIdentifier { offset: 0, .. })
        ));
        assert!(matches!(
            parse("x^1.5", &vars(&["x"]), &none),
            Err(ExprError::NonIntegerExponent { offset: 2 })
        ));
        assert!(matches!(
            parse("x^-1", &vars(&["x"]), &none),
            Err(ExprError::NonIntegerExponent { .. })
        ));
        assert!(matches!(
            parse("(x + 1", &vars(&["x"]), &none),
            Err(ExprError::Syntax { offset: 6, .. })
        ));
        assert!(matches!(
            parse("foo(x)", &vars(&["x"]), &none),
            Err(ExprError::UnknownIdentifier { .. })
        ));
        assert!(matches!(
            parse("x 2", &vars(&["x"]), &none),
            Err(ExprError::Syntax { offset: 2, .. })
        ));
    }

    #[test]
    fn projection() {
        let e = p("v", &["s", "v"]);
        assert_eq!(e.eval_point(&[0.5, 2.0]).unwrap(), 2.0);
    }

    #[test]
    fn pendulum_torque_with_constants() {
        let consts: BTreeMap<String, f64> = [("m", 1.0), ("G", 9.81), ("L", 1.0), ("b", 0.1)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let e = parse("-m*G*L*sin(s) - b*v", &vars(&["s", "v"]), &consts).unwrap();
        let v = e.eval_point(&[FRAC_PI_2, 0.0]).unwrap();
        assert!((v + 9.81).abs() < 1e-12, "{v}");
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let e = p("1/x", &["x"]);
        assert_eq!(e.eval_point(&[0.0]), Err(ExprError::DivisionByZero));
        assert!(matches!(
            e.eval_interval(&[iv(-1.0, 1.0)]),
            Err(ExprError::EnclosureFailure(_))
        ));
        let q = e.eval_interval(&[iv(2.0, 4.0)]).unwrap();
        assert!(q.contains(0.25) && q.contains(0.5));
    }

    #[test]
    fn precedence_and_associativity() {
        let e = p("2^3^2", &[]);
        assert_eq!(e, Expr::Lit(512.0));
        let e = p("-x^2", &["x"]);
        assert_eq!(e.eval_point(&[3.0]).unwrap(), -9.0);
        let e = p("8 / 4 / 2", &[]);
        assert_eq!(e, Expr::Lit(1.0));
        let e = p("1 - 2 - 3", &[]);
        assert_eq!(e, Expr::Lit(-4.0));
        let e = p("x^(1+1)", &["x"]);
        assert_eq!(e, Expr::Pow(Box::new(Expr::Var(0)), 2));
    }

    #[test]
    fn interval_sine_quarter_period() {
        let e = p("sin(s)", &["s"]);
        let r = e.eval_interval(&[iv(0.0, FRAC_PI_2)]).unwrap();
        assert!(r.lo() <= 0.0 && r.lo() > -1e-15);
        assert_eq!(r.hi(), 1.0);
    }

    #[test]
    fn interval_product() {
        let e = p("s*v", &["s", "v"]);
        let r = e.eval_interval(&[iv(1.0, 2.0), iv(-1.0, 1.0)]).unwrap();
        assert!(r.contains(-2.0) && r.contains(2.0));
        assert!(r.width() < 4.0 + 1e-12);
    }

    #[test]
    fn interval_encloses_dense_grid() {
        let e = p("-s + 2*s^2*v", &["s", "v"]);
        let b = [iv(0.9, 1.1), iv(0.9, 1.1)];
        let r = e.eval_interval(&b).unwrap();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..100 {
            for j in 0..100 {
                let s = 0.9 + 0.2 * i as f64 / 99.0;
                let v = 0.9 + 0.2 * j as f64 / 99.0;
                let y = e.eval_point(&[s, v]).unwrap();
                lo = lo.min(y);
                hi = hi.max(y);
            }
        }
        assert!(r.lo() <= lo && hi <= r.hi(), "{r:?} vs [{lo}, {hi}]");
    }

    #[test]
    fn display_reparses_to_same_tree() {
        let names = vars(&["s", "v"]);
        for src in [
            "-s + 2*s^2*v",
            "(-9.81*sin(s) - 0.1*v)/(1*1^2)",
            "-3*s - 0.1*s*v^3",
            "abs(s) * exp(-v) + cos(s - v) - tan(0.5*s)",
        ] {
            let e = parse(src, &names, &BTreeMap::new()).unwrap();
            let shown = e.display(&names).to_string();
            let again = parse(&shown, &names, &BTreeMap::new()).unwrap();
            assert_eq!(e, again, "{src} -> {shown}");
        }
    }

    #[test]
    fn parsing_is_deterministic() {
        let a = p("-s + 2*s^2*v - sin(v)", &["s", "v"]);
        let b = p("-s + 2*s^2*v - sin(v)", &["s", "v"]);
        assert_eq!(a, b);
        let x = [0.3, -1.7];
        assert_eq!(
            a.eval_point(&x).unwrap().to_bits(),
            b.eval_point(&x).unwrap().to_bits()
        );
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (-3.0f64..3.0).prop_map(Expr::Lit),
            (0usize..2).prop_map(Expr::Var),
        ];
        leaf.prop_recursive(4, 24, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone(), 0usize..3).prop_map(|(a, b, k)| {
                    let op = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul][k];
                    Expr::Binary(op, Box::new(a), Box::new(b))
                }),
                (inner.clone(), 0usize..4).prop_map(|(a, k)| {
                    let op = [UnaryOp::Neg, UnaryOp::Sin, UnaryOp::Cos, UnaryOp::Abs][k];
                    Expr::Unary(op, Box::new(a))
                }),
                (inner, 0u32..4).prop_map(|(a, n)| Expr::Pow(Box::new(a), n)),
            ]
        })
    }

    proptest! {
        #[test]
        fn point_values_lie_in_enclosure(
            e in arb_expr(),
            lo in proptest::array::uniform2(-2.0f64..2.0),
            w in proptest::array::uniform2(0.0f64..1.0),
            t in proptest::collection::vec(proptest::array::uniform2(0.0f64..=1.0), 50),
        ) {
            let b = [iv(lo[0], lo[0] + w[0]), iv(lo[1], lo[1] + w[1])];
            let r = e.eval_interval(&b).unwrap();
            for s in t {
                let x = [
                    (b[0].lo() + s[0] * b[0].width()).min(b[0].hi()),
                    (b[1].lo() + s[1] * b[1].width()).min(b[1].hi()),
                ];
                let y = e.eval_point(&x).unwrap();
                prop_assert!(r.contains(y), "{y} not in {r:?}");
            }
        }

        #[test]
        fn enclosure_is_monotone(
            e in arb_expr(),
            lo in proptest::array::uniform2(-2.0f64..2.0),
            w in proptest::array::uniform2(0.0f64..1.0),
            f in proptest::array::uniform2(0.0f64..=1.0),
        ) {
            let outer = [iv(lo[0], lo[0] + w[0]), iv(lo[1], lo[1] + w[1])];
            let inner = [
                iv(lo[0], lo[0] + f[0] * w[0]),
                iv(lo[1], lo[1] + f[1] * w[1]),
            ];
            let ro = e.eval_interval(&outer).unwrap();
            let ri = e.eval_interval(&inner).unwrap();
            let slack = 1e-9 * (1.0 + ro.lo().abs().max(ro.hi().abs()));
            prop_assert!(ri.lo() >= ro.lo() - slack && ri.hi() <= ro.hi() + slack);
        }
    }
}
