//! Exact rational arithmetic for tool expressions.
//!
//! Expressions are evaluated over arbitrary-precision rationals so that
//! intermediate results compared by the step oracle never suffer float
//! drift. Decimals parse exactly (`0.1` is 1/10), and results render back
//! to decimal text: integers without a point, everything else rounded to
//! ten significant digits.
//!
//! Operator precedence, tightest first: `^`, unary minus, `*` `/`, `+` `-`.
//! Binary operators are left-associative. Magnitudes are bounded: any
//! intermediate whose numerator or denominator exceeds 256 bits is an
//! overflow error rather than a silent slowdown.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use thiserror::Error;

/// Exact rational value used throughout the crate.
pub type Rational = BigRational;

/// Bit bound on numerator and denominator of any intermediate value.
pub const RATIONAL_BIT_BOUND: u64 = 256;

/// Significant digits used when rendering non-integer rationals.
pub const RENDER_SIG_DIGITS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("division by zero")]
    DivisionByZero,
    #[error("non-integer exponent")]
    NonIntegerExponent,
    #[error("value exceeds the {RATIONAL_BIT_BOUND}-bit rational bound")]
    Overflow,
    #[error("undefined variable: {0}")]
    UndefinedVariable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

/// Parsed expression tree. Variables are only meaningful when evaluated
/// with an environment; the plain calculator path rejects them.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Number(Rational),
    Variable(String),
    Negate(Box<Expr>),
    Binary {
        op: BinOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
}

// --- Tokenizer ---

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Number(Rational),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn tokenize(mut self) -> Result<Vec<(Token, usize)>, ExprError> {
        let mut out = Vec::new();
        loop {
            self.skip_ws();
            if self.pos >= self.src.len() {
                return Ok(out);
            }
            let start = self.pos;
            let b = self.src[self.pos];
            let token = match b {
                b'+' => {
                    self.pos += 1;
                    Token::Plus
                }
                b'-' => {
                    self.pos += 1;
                    Token::Minus
                }
                b'*' => {
                    self.pos += 1;
                    Token::Star
                }
                b'/' => {
                    self.pos += 1;
                    Token::Slash
                }
                b'^' => {
                    self.pos += 1;
                    Token::Caret
                }
                b'(' => {
                    self.pos += 1;
                    Token::LParen
                }
                b')' => {
                    self.pos += 1;
                    Token::RParen
                }
                b'0'..=b'9' | b'.' => self.lex_number(start)?,
                b'A'..=b'Z' | b'a'..=b'z' | b'_' => self.lex_ident(start),
                other => {
                    return Err(ExprError::Parse {
                        offset: start,
                        message: format!("unexpected character {:?}", other as char),
                    })
                }
            };
            out.push((token, start));
        }
    }

    fn lex_number(&mut self, start: usize) -> Result<Token, ExprError> {
        let mut int_digits = 0usize;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
            int_digits += 1;
        }
        let mut frac_digits = 0usize;
        if self.pos < self.src.len() && self.src[self.pos] == b'.' {
            self.pos += 1;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
                frac_digits += 1;
            }
        }
        if int_digits == 0 && frac_digits == 0 {
            return Err(ExprError::Parse {
                offset: start,
                message: "malformed number".into(),
            });
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        let value = decimal_to_rational(text).ok_or_else(|| ExprError::Parse {
            offset: start,
            message: "malformed number".into(),
        })?;
        Ok(Token::Number(value))
    }

    fn lex_ident(&mut self, start: usize) -> Token {
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        Token::Ident(text.to_string())
    }
}

// --- Parser ---

struct Parser {
    tokens: Vec<(Token, usize)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|&(_, o)| o)
            .unwrap_or(self.end)
    }

    fn advance(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).map(|(t, _)| t.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        while let Some(op) = match self.peek() {
            Some(Token::Plus) => Some(BinOp::Add),
            Some(Token::Minus) => Some(BinOp::Sub),
            _ => None,
        } {
            self.advance();
            let rhs = self.term()?;
            lhs = Expr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(op) = match self.peek() {
            Some(Token::Star) => Some(BinOp::Mul),
            Some(Token::Slash) => Some(BinOp::Div),
            _ => None,
        } {
            self.advance();
            let rhs = self.unary()?;
            lhs = Expr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if matches!(self.peek(), Some(Token::Minus)) {
            self.advance();
            let inner = self.unary()?;
            return Ok(Expr::Negate(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.atom()?;
        while matches!(self.peek(), Some(Token::Caret)) {
            self.advance();
            let rhs = self.exponent()?;
            lhs = Expr::Binary {
                op: BinOp::Pow,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn exponent(&mut self) -> Result<Expr, ExprError> {
        if matches!(self.peek(), Some(Token::Minus)) {
            self.advance();
            let inner = self.exponent()?;
            return Ok(Expr::Negate(Box::new(inner)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        let offset = self.offset();
        match self.advance() {
            Some(Token::Number(v)) => Ok(Expr::Number(v)),
            Some(Token::Ident(name)) => Ok(Expr::Variable(name)),
            Some(Token::LParen) => {
                let inner = self.expr()?;
                match self.advance() {
                    Some(Token::RParen) => Ok(inner),
                    _ => Err(ExprError::Parse {
                        offset: self.end,
                        message: "expected closing parenthesis".into(),
                    }),
                }
            }
            Some(other) => Err(ExprError::Parse {
                offset,
                message: format!("unexpected token {other:?}"),
            }),
            None => Err(ExprError::Parse {
                offset,
                message: "unexpected end of expression".into(),
            }),
        }
    }
}

/// Parse an expression, allowing variable references.
pub fn parse_expr(text: &str) -> Result<Expr, ExprError> {
    let tokens = Lexer::new(text).tokenize()?;
    let mut parser = Parser {
        tokens,
        pos: 0,
        end: text.len(),
    };
    let expr = parser.expr()?;
    if parser.pos != parser.tokens.len() {
        return Err(ExprError::Parse {
            offset: parser.offset(),
            message: "trailing input after expression".into(),
        });
    }
    Ok(expr)
}

fn check_bound(v: &Rational) -> Result<(), ExprError> {
    if v.numer().bits() > RATIONAL_BIT_BOUND || v.denom().bits() > RATIONAL_BIT_BOUND {
        Err(ExprError::Overflow)
    } else {
        Ok(())
    }
}

fn pow_rational(base: &Rational, exp: &Rational) -> Result<Rational, ExprError> {
    if !exp.is_integer() {
        return Err(ExprError::NonIntegerExponent);
    }
    let exp_int = exp.to_integer();
    if base.is_zero() {
        if exp_int.is_negative() {
            return Err(ExprError::DivisionByZero);
        }
        return Ok(if exp_int.is_zero() {
            Rational::one() // 0^0 = 1 by convention
        } else {
            Rational::zero()
        });
    }
    let abs_one = base.numer().magnitude() == base.denom().magnitude();
    let exp_mag = exp_int.magnitude();
    if !abs_one && exp_mag.bits() > 16 {
        // |base| >= 2 in numerator or denominator: huge exponents overflow
        // the bit bound long before they finish computing.
        return Err(ExprError::Overflow);
    }
    if abs_one {
        let negative = base.is_negative() && exp_int.magnitude().bit(0);
        return Ok(if negative {
            -Rational::one()
        } else {
            Rational::one()
        });
    }
    let e = exp_mag.to_u32().ok_or(ExprError::Overflow)?;
    if u64::from(e) > RATIONAL_BIT_BOUND {
        return Err(ExprError::Overflow);
    }
    let numer = base.numer().pow(e);
    let denom = base.denom().pow(e);
    let value = Rational::new(numer, denom);
    let value = if exp_int.is_negative() {
        Rational::new(value.denom().clone(), value.numer().clone())
    } else {
        value
    };
    check_bound(&value)?;
    Ok(value)
}

/// Evaluate a parsed expression against a variable environment.
pub fn eval_with_vars(
    expr: &Expr,
    vars: &BTreeMap<String, Rational>,
) -> Result<Rational, ExprError> {
    match expr {
        Expr::Number(v) => Ok(v.clone()),
        Expr::Variable(name) => vars
            .get(name)
            .cloned()
            .ok_or_else(|| ExprError::UndefinedVariable(name.clone())),
        Expr::Negate(inner) => Ok(-eval_with_vars(inner, vars)?),
        Expr::Binary { op, lhs, rhs } => {
            let l = eval_with_vars(lhs, vars)?;
            let r = eval_with_vars(rhs, vars)?;
            let value = match op {
                BinOp::Add => l + r,
                BinOp::Sub => l - r,
                BinOp::Mul => l * r,
                BinOp::Div => {
                    if r.is_zero() {
                        return Err(ExprError::DivisionByZero);
                    }
                    l / r
                }
                BinOp::Pow => pow_rational(&l, &r)?,
            };
            check_bound(&value)?;
            Ok(value)
        }
    }
}

/// Evaluate a calculator expression (no variables) to an exact rational.
pub fn eval_expression(text: &str) -> Result<Rational, ExprError> {
    let expr = parse_expr(text)?;
    eval_with_vars(&expr, &BTreeMap::new())
}

/// Parse a plain decimal literal (optional sign, digits, optional fraction)
/// into an exact rational. Returns `None` on anything else.
pub fn parse_decimal(text: &str) -> Option<Rational> {
    let trimmed = text.trim();
    let (negative, rest) = match trimmed.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, trimmed.strip_prefix('+').unwrap_or(trimmed)),
    };
    let value = decimal_to_rational(rest)?;
    Some(if negative { -value } else { value })
}

fn decimal_to_rational(text: &str) -> Option<Rational> {
    if text.is_empty() {
        return None;
    }
    let (int_part, frac_part) = match text.split_once('.') {
        Some((i, f)) => (i, f),
        None => (text, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.bytes().all(|b| b.is_ascii_digit())
        || !frac_part.bytes().all(|b| b.is_ascii_digit())
    {
        return None;
    }
    let digits = format!("{int_part}{frac_part}");
    let numer: BigInt = if digits.is_empty() {
        return None;
    } else {
        digits.parse().ok()?
    };
    let denom = BigInt::from(10u32).pow(frac_part.len() as u32);
    Some(Rational::new(numer, denom))
}

/// Render a rational as decimal text: integers exactly, non-integers
/// rounded half-away-from-zero to ten significant digits with trailing
/// zeros stripped.
pub fn render_decimal(value: &Rational) -> String {
    if value.is_integer() {
        return value.to_integer().to_string();
    }
    let negative = value.is_negative();
    let magnitude = value.abs();
    let numer = magnitude.numer().clone();
    let denom = magnitude.denom().clone();

    // Decimal exponent e with 10^e <= |v| < 10^(e+1).
    let mut e: i64 = (numer.bits() as i64 - denom.bits() as i64) * 301 / 1000;
    let ten = BigInt::from(10u32);
    loop {
        let scaled_denom = if e >= 0 {
            &denom * ten.pow(e as u32)
        } else {
            denom.clone()
        };
        let scaled_numer = if e >= 0 {
            numer.clone()
        } else {
            &numer * ten.pow((-e) as u32)
        };
        if scaled_numer < scaled_denom {
            e -= 1;
            continue;
        }
        if scaled_numer >= &scaled_denom * &ten {
            e += 1;
            continue;
        }
        break;
    }

    // significand = round(|v| * 10^(digits-1-e)), half away from zero.
    let shift = RENDER_SIG_DIGITS as i64 - 1 - e;
    let (num_scaled, den_scaled) = if shift >= 0 {
        (&numer * ten.pow(shift as u32), denom.clone())
    } else {
        (numer.clone(), &denom * ten.pow((-shift) as u32))
    };
    let mut significand: BigInt = (&num_scaled * 2 + &den_scaled) / (&den_scaled * 2);
    let upper = ten.pow(RENDER_SIG_DIGITS as u32);
    if significand >= upper {
        significand /= &ten;
        e += 1;
    }

    let digits = significand.to_string();
    debug_assert_eq!(digits.len(), RENDER_SIG_DIGITS);
    let body = if e >= RENDER_SIG_DIGITS as i64 - 1 {
        // All significant digits are on the integer side.
        let zeros = (e + 1) as usize - digits.len();
        format!("{digits}{}", "0".repeat(zeros))
    } else if e >= 0 {
        let split = (e + 1) as usize;
        let (int_part, frac_part) = digits.split_at(split);
        let frac = frac_part.trim_end_matches('0');
        if frac.is_empty() {
            int_part.to_string()
        } else {
            format!("{int_part}.{frac}")
        }
    } else {
        let zeros = (-e - 1) as usize;
        let frac = digits.trim_end_matches('0');
        format!("0.{}{frac}", "0".repeat(zeros))
    };
    if negative {
        format!("-{body}")
    } else {
        body
    }
}
