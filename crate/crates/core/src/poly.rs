//! Multivariate polynomials with real coefficients.
//!
//! Used as the symbolic representation of polynomial vector fields: brackets
//! of polynomial fields stay polynomial, so Jacobians and commutators can be
//! formed exactly. A small recursive-descent parser reads expressions over the
//! variables `x1..xn` with `+ - * ^`, numeric constants and parentheses.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{GeoError, Result};

const ZERO_COEFF: f64 = 0.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Poly {
    nvars: usize,
    terms: BTreeMap<Vec<u32>, f64>,
}

impl Poly {
    pub fn zero(nvars: usize) -> Self {
        Poly {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        let mut p = Poly::zero(nvars);
        p.add_term(vec![0; nvars], c);
        p
    }

    /// The coordinate function `x_{var+1}` (zero-based `var`).
    pub fn var(nvars: usize, var: usize) -> Self {
        let mut e = vec![0; nvars];
        e[var] = 1;
        let mut p = Poly::zero(nvars);
        p.add_term(e, 1.0);
        p
    }

    pub fn monomial(coeff: f64, exps: &[u32]) -> Self {
        let mut p = Poly::zero(exps.len());
        p.add_term(exps.to_vec(), coeff);
        p
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.terms
            .keys()
            .map(|e| e.iter().sum::<u32>())
            .max()
            .unwrap_or(0)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&[u32], f64)> {
        self.terms.iter().map(|(e, c)| (e.as_slice(), *c))
    }

    fn add_term(&mut self, exps: Vec<u32>, c: f64) {
        if c == ZERO_COEFF {
            return;
        }
        let entry = self.terms.entry(exps).or_insert(0.0);
        *entry += c;
        if *entry == 0.0 {
            self.terms.retain(|_, v| *v != 0.0);
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (e, c) in &self.terms {
            let mut m = *c;
            for (xi, &k) in x.iter().zip(e) {
                if k > 0 {
                    m *= xi.powi(k as i32);
                }
            }
            acc += m;
        }
        acc
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.add_term(e.clone(), *c);
        }
        out
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Poly {
        let mut out = Poly::zero(self.nvars);
        for (e, c) in &self.terms {
            out.add_term(e.clone(), c * s);
        }
        out
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::zero(self.nvars);
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let e: Vec<u32> = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                out.add_term(e, ca * cb);
            }
        }
        out
    }

    pub fn pow(&self, k: u32) -> Poly {
        let mut out = Poly::constant(self.nvars, 1.0);
        for _ in 0..k {
            out = out.mul(self);
        }
        out
    }

    /// Partial derivative with respect to the zero-based variable `var`.
    pub fn derivative(&self, var: usize) -> Poly {
        let mut out = Poly::zero(self.nvars);
        for (e, c) in &self.terms {
            if e[var] == 0 {
                continue;
            }
            let mut d = e.clone();
            d[var] -= 1;
            out.add_term(d, c * e[var] as f64);
        }
        out
    }

    pub fn parse(src: &str, nvars: usize) -> Result<Poly> {
        let mut parser = Parser {
            chars: src.chars().collect(),
            pos: 0,
            nvars,
        };
        let p = parser.expr()?;
        parser.skip_ws();
        if parser.pos != parser.chars.len() {
            return Err(GeoError::Parse(format!(
                "unexpected '{}' at position {} in \"{}\"",
                parser.chars[parser.pos], parser.pos, src
            )));
        }
        Ok(p)
    }
}

impl fmt::Display for Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (e, c) in &self.terms {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            write!(f, "{c}")?;
            for (i, &k) in e.iter().enumerate() {
                match k {
                    0 => {}
                    1 => write!(f, "*x{}", i + 1)?,
                    _ => write!(f, "*x{}^{}", i + 1, k)?,
                }
            }
        }
        Ok(())
    }
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
    nvars: usize,
}

impl Parser {
    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }

    fn err(&self, msg: &str) -> GeoError {
        GeoError::Parse(format!("{msg} at position {}", self.pos))
    }

    fn expr(&mut self) -> Result<Poly> {
        let mut acc = self.term()?;
        while let Some(c) = self.peek() {
            match c {
                '+' => {
                    self.pos += 1;
                    acc = acc.add(&self.term()?);
                }
                '-' => {
                    self.pos += 1;
                    acc = acc.sub(&self.term()?);
                }
                _ => break,
            }
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<Poly> {
        let mut acc = self.unary()?;
        while self.peek() == Some('*') {
            self.pos += 1;
            acc = acc.mul(&self.unary()?);
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<Poly> {
        match self.peek() {
            Some('-') => {
                self.pos += 1;
                Ok(self.unary()?.scale(-1.0))
            }
            Some('+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Poly> {
        let base = self.atom()?;
        if self.peek() == Some('^') {
            self.pos += 1;
            self.skip_ws();
            let start = self.pos;
            while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if start == self.pos {
                return Err(self.err("expected a non-negative integer exponent"));
            }
            let k: u32 = self.chars[start..self.pos]
                .iter()
                .collect::<String>()
                .parse()
                .map_err(|_| self.err("exponent out of range"))?;
            return Ok(base.pow(k));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Poly> {
        match self.peek() {
            Some('(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if self.peek() != Some(')') {
                    return Err(self.err("expected ')'"));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some('x') => {
                self.pos += 1;
                let start = self.pos;
                while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
                let idx: usize = self.chars[start..self.pos]
                    .iter()
                    .collect::<String>()
                    .parse()
                    .map_err(|_| self.err("expected variable index after 'x'"))?;
                if idx == 0 || idx > self.nvars {
                    return Err(self.err(&format!("variable x{idx} outside x1..x{}", self.nvars)));
                }
                Ok(Poly::var(self.nvars, idx - 1))
            }
            Some(c) if c.is_ascii_digit() || c == '.' => {
                let start = self.pos;
                while self.pos < self.chars.len()
                    && (self.chars[self.pos].is_ascii_digit() || self.chars[self.pos] == '.')
                {
                    self.pos += 1;
                }
                // scientific notation, e.g. 1e-3
                if self.pos < self.chars.len() && matches!(self.chars[self.pos], 'e' | 'E') {
                    let save = self.pos;
                    self.pos += 1;
                    if self.pos < self.chars.len() && matches!(self.chars[self.pos], '+' | '-') {
                        self.pos += 1;
                    }
                    let digits = self.pos;
                    while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_digit() {
                        self.pos += 1;
                    }
                    if digits == self.pos {
                        self.pos = save;
                    }
                }
                let text: String = self.chars[start..self.pos].iter().collect();
                let v: f64 = text
                    .parse()
                    .map_err(|_| self.err(&format!("bad number '{text}'")))?;
                Ok(Poly::constant(self.nvars, v))
            }
            Some(c) => Err(self.err(&format!("unexpected '{c}'"))),
            None => Err(self.err("unexpected end of input")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_evaluates() {
        let p = Poly::parse("x1^2 - 3*x2 + 0.5*(x1 + 1)", 2).unwrap();
        assert!((p.eval(&[2.0, 1.0]) - (4.0 - 3.0 + 1.5)).abs() < 1e-15);
        let q = Poly::parse("-x1^2", 1).unwrap();
        assert_eq!(q.eval(&[3.0]), -9.0);
        let r = Poly::parse("2e-1*x1", 1).unwrap();
        assert!((r.eval(&[5.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Poly::parse("x3", 2).is_err());
        assert!(Poly::parse("x1 +", 2).is_err());
        assert!(Poly::parse("(x1", 2).is_err());
        assert!(Poly::parse("x1 ^ y", 2).is_err());
        assert!(Poly::parse("sin(x1)", 2).is_err());
    }

    #[test]
    fn derivative_of_product() {
        let p = Poly::parse("x1^3*x2 + x2^2", 2).unwrap();
        let d1 = p.derivative(0);
        let d2 = p.derivative(1);
        assert_eq!(d1, Poly::parse("3*x1^2*x2", 2).unwrap());
        assert_eq!(d2, Poly::parse("x1^3 + 2*x2", 2).unwrap());
    }

    #[test]
    fn cancellation_leaves_zero() {
        let p = Poly::parse("x1*x2 - x2*x1", 2).unwrap();
        assert!(p.is_zero());
        assert_eq!(p.degree(), 0);
    }
}
