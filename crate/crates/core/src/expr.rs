//! A small expression language for coefficient functions of `(t, x1, ..., xd)`.
//!
//! Grammar, loosest binding first:
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := ('-' | '+') unary | power
//! power   := primary ('^' unary)?
//! primary := number | 't' | 'x' digits | func '(' expr ')' | '(' expr ')'
//! func    := sin | cos | exp | sqrt | abs
//! ```
//!
//! `^` binds tighter than unary minus, so `-t^2` is `-(t^2)`, and it is right
//! associative. Evaluation never returns NaN silently: domain violations are
//! reported as [`EvalError`].

use std::fmt;

use crate::error::{Error, EvalError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    T,
    /// Zero-based spatial coordinate; `X(0)` is written `x1`.
    X(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Exp,
    Sqrt,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn constant(value: f64) -> Self {
        Expr::Const(value)
    }

    pub fn x(index: usize) -> Self {
        Expr::Var(Var::X(index))
    }

    pub fn t() -> Self {
        Expr::Var(Var::T)
    }

    pub fn unary(op: UnaryOp, arg: Expr) -> Self {
        Expr::Unary(op, Box::new(arg))
    }

    pub fn binary(op: BinaryOp, lhs: Expr, rhs: Expr) -> Self {
        Expr::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> std::result::Result<f64, EvalError> {
        let v = self.eval_inner(t, x)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite)
        }
    }

    fn eval_inner(&self, t: f64, x: &[f64]) -> std::result::Result<f64, EvalError> {
        Ok(match self {
            Expr::Const(c) => *c,
            Expr::Var(Var::T) => t,
            Expr::Var(Var::X(i)) => *x.get(*i).ok_or(EvalError::UnboundVariable {
                index: i + 1,
                dim: x.len(),
            })?,
            Expr::Unary(op, arg) => {
                let a = arg.eval_inner(t, x)?;
                match op {
                    UnaryOp::Neg => -a,
                    UnaryOp::Sin => a.sin(),
                    UnaryOp::Cos => a.cos(),
                    UnaryOp::Exp => a.exp(),
                    UnaryOp::Abs => a.abs(),
                    UnaryOp::Sqrt => {
                        if a < 0.0 {
                            return Err(EvalError::NegativeSqrt(a));
                        }
                        a.sqrt()
                    }
                }
            }
            Expr::Binary(op, lhs, rhs) => {
                let a = lhs.eval_inner(t, x)?;
                let b = rhs.eval_inner(t, x)?;
                match op {
                    BinaryOp::Add => a + b,
                    BinaryOp::Sub => a - b,
                    BinaryOp::Mul => a * b,
                    BinaryOp::Div => {
                        if b == 0.0 {
                            return Err(EvalError::DivisionByZero);
                        }
                        a / b
                    }
                    BinaryOp::Pow => {
                        if a < 0.0 && b.fract() != 0.0 {
                            return Err(EvalError::FractionalPowerOfNegative {
                                base: a,
                                exponent: b,
                            });
                        }
                        if a == 0.0 && b < 0.0 {
                            return Err(EvalError::DivisionByZero);
                        }
                        a.powf(b)
                    }
                }
            }
        })
    }

    /// Largest spatial index referenced, as a dimension (so `x3` gives 3).
    pub fn required_dim(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Var(Var::T) => 0,
            Expr::Var(Var::X(i)) => i + 1,
            Expr::Unary(_, a) => a.required_dim(),
            Expr::Binary(_, a, b) => a.required_dim().max(b.required_dim()),
        }
    }

    pub fn depends_on_space(&self) -> bool {
        match self {
            Expr::Const(_) | Expr::Var(Var::T) => false,
            Expr::Var(Var::X(_)) => true,
            Expr::Unary(_, a) => a.depends_on_space(),
            Expr::Binary(_, a, b) => a.depends_on_space() || b.depends_on_space(),
        }
    }

    pub fn depends_on_time(&self) -> bool {
        match self {
            Expr::Const(_) | Expr::Var(Var::X(_)) => false,
            Expr::Var(Var::T) => true,
            Expr::Unary(_, a) => a.depends_on_time(),
            Expr::Binary(_, a, b) => a.depends_on_time() || b.depends_on_time(),
        }
    }

    /// `Some(c)` when the expression is a literal constant (possibly negated).
    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            Expr::Unary(UnaryOp::Neg, a) => a.as_constant().map(|c| -c),
            _ => None,
        }
    }
}

impl fmt::Display for Expr {
    /// Canonical, fully parenthesized form; `parse_expr` reads it back.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => {
                if c.is_sign_negative() {
                    write!(f, "(-{:?})", c.abs())
                } else {
                    write!(f, "{:?}", c)
                }
            }
            Expr::Var(Var::T) => write!(f, "t"),
            Expr::Var(Var::X(i)) => write!(f, "x{}", i + 1),
            Expr::Unary(UnaryOp::Neg, a) => write!(f, "(-{})", a),
            Expr::Unary(op, a) => {
                let name = match op {
                    UnaryOp::Sin => "sin",
                    UnaryOp::Cos => "cos",
                    UnaryOp::Exp => "exp",
                    UnaryOp::Sqrt => "sqrt",
                    UnaryOp::Abs => "abs",
                    UnaryOp::Neg => unreachable!(),
                };
                write!(f, "{}({})", name, a)
            }
            Expr::Binary(op, a, b) => {
                let sym = match op {
                    BinaryOp::Add => "+",
                    BinaryOp::Sub => "-",
                    BinaryOp::Mul => "*",
                    BinaryOp::Div => "/",
                    BinaryOp::Pow => "^",
                };
                write!(f, "({} {} {})", a, sym, b)
            }
        }
    }
}

pub fn parse_expr(source: &str) -> Result<Expr> {
    if source.trim().is_empty() {
        return Err(Error::Syntax {
            offset: 0,
            message: "empty expression".into(),
        });
    }
    let mut p = Parser {
        src: source.as_bytes(),
        pos: 0,
    };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(p.syntax(format!("unexpected `{}`", p.src[p.pos] as char)));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn syntax(&self, message: String) -> Error {
        Error::Syntax {
            offset: self.pos,
            message,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => BinaryOp::Add,
                Some(b'-') => BinaryOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => BinaryOp::Mul,
                Some(b'/') => BinaryOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat(b'-') {
            return Ok(Expr::unary(UnaryOp::Neg, self.unary()?));
        }
        if self.eat(b'+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.primary()?;
        if self.eat(b'^') {
            let exponent = self.unary()?;
            return Ok(Expr::binary(BinaryOp::Pow, base, exponent));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr> {
        match self.peek() {
            None => Err(self.syntax("unexpected end of input".into())),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.syntax("expected `)`".into()));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.identifier(),
            Some(c) => Err(self.syntax(format!("unexpected `{}`", c as char))),
        }
    }

    fn number(&mut self) -> Result<Expr> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_digit() || self.src[self.pos] == b'.')
        {
            self.pos += 1;
        }
        // optional exponent, only if followed by a digit (or sign + digit)
        if self.pos < self.src.len() && matches!(self.src[self.pos], b'e' | b'E') {
            let mut look = self.pos + 1;
            if look < self.src.len() && matches!(self.src[look], b'+' | b'-') {
                look += 1;
            }
            if look < self.src.len() && self.src[look].is_ascii_digit() {
                self.pos = look;
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii slice");
        text.parse::<f64>()
            .map(Expr::Const)
            .map_err(|_| Error::Syntax {
                offset: start,
                message: format!("malformed number `{}`", text),
            })
    }

    fn identifier(&mut self) -> Result<Expr> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii slice");
        let func = match name {
            "sin" => Some(UnaryOp::Sin),
            "cos" => Some(UnaryOp::Cos),
            "exp" => Some(UnaryOp::Exp),
            "sqrt" => Some(UnaryOp::Sqrt),
            "abs" => Some(UnaryOp::Abs),
            _ => None,
        };
        if let Some(op) = func {
            if !self.eat(b'(') {
                return Err(self.syntax(format!("expected `(` after `{}`", name)));
            }
            if self.eat(b')') {
                return Err(Error::Arity {
                    name: name.into(),
                    expected: 1,
                    found: 0,
                });
            }
            let arg = self.expr()?;
            let mut found = 1;
            while self.eat(b',') {
                self.expr()?;
                found += 1;
            }
            if found != 1 {
                return Err(Error::Arity {
                    name: name.into(),
                    expected: 1,
                    found,
                });
            }
            if !self.eat(b')') {
                return Err(self.syntax("expected `)`".into()));
            }
            return Ok(Expr::unary(op, arg));
        }
        if name == "t" {
            return Ok(Expr::t());
        }
        if let Some(digits) = name.strip_prefix('x') {
            if let Ok(k) = digits.parse::<usize>() {
                if k >= 1 && !digits.starts_with('0') {
                    return Ok(Expr::x(k - 1));
                }
            }
        }
        Err(Error::UnknownIdentifier {
            name: name.into(),
            offset: start,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_variable() {
        assert_eq!(parse_expr("x1").unwrap(), Expr::x(0));
        assert_eq!(parse_expr(" t ").unwrap(), Expr::t());
    }

    #[test]
    fn precedence() {
        let e = parse_expr("-t^2").unwrap();
        assert_eq!(
            e,
            Expr::unary(
                UnaryOp::Neg,
                Expr::binary(BinaryOp::Pow, Expr::t(), Expr::constant(2.0))
            )
        );
        assert_eq!(parse_expr("1+2*3").unwrap().eval(0.0, &[]).unwrap(), 7.0);
        assert_eq!(parse_expr("2^3^2").unwrap().eval(0.0, &[]).unwrap(), 512.0);
        assert_eq!(parse_expr("8/2/2").unwrap().eval(0.0, &[]).unwrap(), 2.0);
        assert_eq!(parse_expr("2^-1").unwrap().eval(0.0, &[]).unwrap(), 0.5);
        assert_eq!(parse_expr("1e-3*1E+3").unwrap().eval(0.0, &[]).unwrap(), 1.0);
    }

    #[test]
    fn oscillating_perturbation_term() {
        let src = "exp(-t^2/(2.01*0.5))*sin(t/sqrt(0.5))^(2/2.01)*cos(x1)";
        let e = parse_expr(src).unwrap();
        let (t, x) = (0.3_f64, 0.7_f64);
        let want = (-t * t / (2.01 * 0.5)).exp()
            * (t / 0.5_f64.sqrt()).sin().powf(2.0 / 2.01)
            * x.cos();
        assert!((e.eval(t, &[x]).unwrap() - want).abs() < 1e-15);
        match &e {
            Expr::Binary(BinaryOp::Mul, lhs, rhs) => {
                assert_eq!(**rhs, Expr::unary(UnaryOp::Cos, Expr::x(0)));
                assert!(matches!(**lhs, Expr::Binary(BinaryOp::Mul, _, _)));
            }
            other => panic!("unexpected root {:?}", other),
        }
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let e = parse_expr("1/(x1-x1)").unwrap();
        for x in [-2.0, 0.0, 3.5] {
            assert_eq!(e.eval(0.1, &[x]), Err(EvalError::DivisionByZero));
        }
    }

    #[test]
    fn fractional_power_of_negative_is_an_error() {
        let e = parse_expr("x1^0.5").unwrap();
        assert!(matches!(
            e.eval(0.0, &[-1.0]),
            Err(EvalError::FractionalPowerOfNegative { .. })
        ));
        assert_eq!(e.eval(0.0, &[4.0]).unwrap(), 2.0);
        assert_eq!(parse_expr("x1^2").unwrap().eval(0.0, &[-3.0]).unwrap(), 9.0);
        assert!(matches!(
            parse_expr("sqrt(x1)").unwrap().eval(0.0, &[-1.0]),
            Err(EvalError::NegativeSqrt(_))
        ));
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        match parse_expr("1 + * 2") {
            Err(Error::Syntax { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{:?}", other),
        }
        assert!(matches!(parse_expr("(1+2"), Err(Error::Syntax { .. })));
        assert!(matches!(parse_expr(""), Err(Error::Syntax { .. })));
        assert!(matches!(parse_expr("1 2"), Err(Error::Syntax { offset: 2, .. })));
    }

    #[test]
    fn unknown_identifiers_and_arity() {
        assert!(matches!(
            parse_expr("y + 1"),
            Err(Error::UnknownIdentifier { offset: 0, .. })
        ));
        assert!(matches!(parse_expr("x0"), Err(Error::UnknownIdentifier { .. })));
        assert!(matches!(parse_expr("tan(t)"), Err(Error::UnknownIdentifier { .. })));
        assert!(matches!(
            parse_expr("sin(t, x1)"),
            Err(Error::Arity { found: 2, .. })
        ));
        assert!(matches!(parse_expr("cos()"), Err(Error::Arity { found: 0, .. })));
    }

    #[test]
    fn print_is_reparsable() {
        let e = parse_expr("-3.5*x2 + abs(sin(t))^(1/3) - exp(-x1)/2").unwrap();
        let printed = e.to_string();
        let back = parse_expr(&printed).unwrap();
        let p = [0.25, -1.5];
        assert_eq!(e.eval(0.4, &p).unwrap(), back.eval(0.4, &p).unwrap());
        assert_eq!(back.to_string(), printed);
        assert_eq!(e.required_dim(), 2);
    }
}
