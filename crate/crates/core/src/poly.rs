//! Sparse multivariate polynomials over a graded-lex monomial order.
//!
//! This is the substrate for the SOS machinery: candidate Lyapunov functions,
//! vector fields and disturbance columns are all stored as [`Polynomial`] /
//! [`PolyVector`] values. Coefficients are `f64`; term collection is exact in
//! the sense that only coefficients that are exactly `0.0` are pruned.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolyError {
    #[error("arity mismatch: expected {expected} variables, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("parse error: {0}")]
    Parse(String),
}

/// A monomial `x^e` identified by its exponent vector.
///
/// Ordered by graded lexicographic order: total degree first, then
/// lexicographic on the exponent vector. This order is the canonical layout
/// used everywhere (basis enumeration, Gram indexing, serialization).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Monomial {
    exponents: Vec<u32>,
}

impl Monomial {
    pub fn new(exponents: Vec<u32>) -> Self {
        Monomial { exponents }
    }

    pub fn constant(n_vars: usize) -> Self {
        Monomial { exponents: vec![0; n_vars] }
    }

    /// Monomial `x_i` in `n_vars` variables.
    pub fn var(n_vars: usize, i: usize) -> Self {
        let mut e = vec![0; n_vars];
        e[i] = 1;
        Monomial { exponents: e }
    }

    pub fn exponents(&self) -> &[u32] {
        &self.exponents
    }

    pub fn n_vars(&self) -> usize {
        self.exponents.len()
    }

    pub fn degree(&self) -> u32 {
        self.exponents.iter().sum()
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        debug_assert_eq!(self.n_vars(), other.n_vars());
        Monomial {
            exponents: self
                .exponents
                .iter()
                .zip(&other.exponents)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.exponents
            .iter()
            .zip(x)
            .map(|(&e, &xi)| xi.powi(e as i32))
            .product()
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        // Graded lex with x1 > x2 > ...: degree first, then reverse
        // lexicographic on the exponent vector (x1^d sorts before x2^d).
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.exponents.cmp(&self.exponents))
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.degree() == 0 {
            return write!(f, "1");
        }
        let mut first = true;
        for (i, &e) in self.exponents.iter().enumerate() {
            if e == 0 {
                continue;
            }
            if !first {
                write!(f, "*")?;
            }
            first = false;
            if e == 1 {
                write!(f, "x{}", i + 1)?;
            } else {
                write!(f, "x{}^{}", i + 1, e)?;
            }
        }
        Ok(())
    }
}

/// Sparse polynomial: a map from monomials to nonzero coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    n_vars: usize,
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    pub fn zero(n_vars: usize) -> Self {
        Polynomial { n_vars, terms: BTreeMap::new() }
    }

    pub fn constant(n_vars: usize, c: f64) -> Self {
        let mut p = Polynomial::zero(n_vars);
        p.add_term(Monomial::constant(n_vars), c);
        p
    }

    /// The variable `x_i` as a polynomial.
    pub fn var(n_vars: usize, i: usize) -> Self {
        let mut p = Polynomial::zero(n_vars);
        p.add_term(Monomial::var(n_vars, i), 1.0);
        p
    }

    pub fn from_terms(n_vars: usize, terms: impl IntoIterator<Item = (Monomial, f64)>) -> Self {
        let mut p = Polynomial::zero(n_vars);
        for (m, c) in terms {
            p.add_term(m, c);
        }
        p
    }

    pub fn monomial(m: Monomial, c: f64) -> Self {
        let n = m.n_vars();
        Polynomial::from_terms(n, [(m, c)])
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    /// Lowest total degree among stored terms; 0 for the zero polynomial.
    pub fn min_degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).min().unwrap_or(0)
    }

    /// Terms in graded lex order.
    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    pub fn coefficient(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    /// Add `c * m` into the polynomial, pruning exact zeros.
    pub fn add_term(&mut self, m: Monomial, c: f64) {
        use std::collections::btree_map::Entry;
        assert_eq!(m.n_vars(), self.n_vars, "monomial arity mismatch");
        match self.terms.entry(m) {
            Entry::Occupied(mut e) => {
                *e.get_mut() += c;
                if *e.get() == 0.0 {
                    e.remove();
                }
            }
            Entry::Vacant(v) => {
                if c != 0.0 {
                    v.insert(c);
                }
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, PolyError> {
        if x.len() != self.n_vars {
            return Err(PolyError::Arity { expected: self.n_vars, got: x.len() });
        }
        Ok(self.terms.iter().map(|(m, c)| c * m.eval(x)).sum())
    }

    pub fn add(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        if other.n_vars != self.n_vars {
            return Err(PolyError::Arity { expected: self.n_vars, got: other.n_vars });
        }
        let mut out = self.clone();
        for (m, c) in other.terms() {
            out.add_term(m.clone(), c);
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        if other.n_vars != self.n_vars {
            return Err(PolyError::Arity { expected: self.n_vars, got: other.n_vars });
        }
        let mut out = Polynomial::zero(self.n_vars);
        for (ma, ca) in self.terms() {
            for (mb, cb) in other.terms() {
                out.add_term(ma.mul(mb), ca * cb);
            }
        }
        Ok(out)
    }

    pub fn scale(&self, a: f64) -> Polynomial {
        if a == 0.0 {
            return Polynomial::zero(self.n_vars);
        }
        Polynomial {
            n_vars: self.n_vars,
            terms: self.terms.iter().map(|(m, c)| (m.clone(), c * a)).collect(),
        }
    }

    /// Partial derivative with respect to `x_i`.
    pub fn partial(&self, i: usize) -> Polynomial {
        let mut out = Polynomial::zero(self.n_vars);
        for (m, c) in self.terms() {
            let e = m.exponents()[i];
            if e == 0 {
                continue;
            }
            let mut exps = m.exponents().to_vec();
            exps[i] -= 1;
            out.add_term(Monomial::new(exps), c * e as f64);
        }
        out
    }

    pub fn grad(&self) -> PolyVector {
        PolyVector {
            components: (0..self.n_vars).map(|i| self.partial(i)).collect(),
        }
    }

    /// `∇p · field`.
    pub fn lie_derivative(&self, field: &PolyVector) -> Result<Polynomial, PolyError> {
        if field.n_vars() != self.n_vars || field.len() != self.n_vars {
            return Err(PolyError::Arity { expected: self.n_vars, got: field.len() });
        }
        let mut out = Polynomial::zero(self.n_vars);
        for (i, fi) in field.components.iter().enumerate() {
            out = out.add(&self.partial(i).mul(fi)?)?;
        }
        Ok(out)
    }

    /// `‖x‖²` as a polynomial.
    pub fn norm_sq(n_vars: usize) -> Polynomial {
        let mut p = Polynomial::zero(n_vars);
        for i in 0..n_vars {
            let mut e = vec![0; n_vars];
            e[i] = 2;
            p.add_term(Monomial::new(e), 1.0);
        }
        p
    }

    /// Textual record: `poly <n_vars> <n_terms>` followed by one line per
    /// term (`e1 .. en coeff`) in graded lex order.
    pub fn serialize(&self) -> String {
        let mut s = format!("poly {} {}\n", self.n_vars, self.terms.len());
        for (m, c) in self.terms() {
            for e in m.exponents() {
                s.push_str(&format!("{} ", e));
            }
            s.push_str(&format!("{:?}\n", c));
        }
        s
    }

    pub fn deserialize(text: &str) -> Result<Polynomial, PolyError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| PolyError::Parse("empty input".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "poly" {
            return Err(PolyError::Parse(format!("bad header: {header}")));
        }
        let n_vars: usize = parts[1]
            .parse()
            .map_err(|_| PolyError::Parse("bad n_vars".into()))?;
        let n_terms: usize = parts[2]
            .parse()
            .map_err(|_| PolyError::Parse("bad term count".into()))?;
        let mut p = Polynomial::zero(n_vars);
        for _ in 0..n_terms {
            let line = lines.next().ok_or_else(|| PolyError::Parse("truncated".into()))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != n_vars + 1 {
                return Err(PolyError::Parse(format!("bad term line: {line}")));
            }
            let exps: Result<Vec<u32>, _> = fields[..n_vars].iter().map(|f| f.parse()).collect();
            let exps = exps.map_err(|_| PolyError::Parse("bad exponent".into()))?;
            let c: f64 = fields[n_vars]
                .parse()
                .map_err(|_| PolyError::Parse("bad coefficient".into()))?;
            p.add_term(Monomial::new(exps), c);
        }
        Ok(p)
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        let mut first = true;
        for (m, c) in self.terms() {
            if first {
                write!(f, "{c}")?;
                first = false;
            } else if c < 0.0 {
                write!(f, " - {}", -c)?;
            } else {
                write!(f, " + {c}")?;
            }
            if m.degree() > 0 {
                write!(f, "*{m}")?;
            }
        }
        Ok(())
    }
}

/// A vector of polynomials sharing the same variable count.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyVector {
    components: Vec<Polynomial>,
}

impl PolyVector {
    pub fn new(components: Vec<Polynomial>) -> Self {
        assert!(!components.is_empty(), "empty polynomial vector");
        let n = components[0].n_vars();
        assert!(
            components.iter().all(|c| c.n_vars() == n),
            "components disagree on n_vars"
        );
        PolyVector { components }
    }

    pub fn zero(n_vars: usize, len: usize) -> Self {
        PolyVector {
            components: (0..len).map(|_| Polynomial::zero(n_vars)).collect(),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.components[0].n_vars()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn component(&self, i: usize) -> &Polynomial {
        &self.components[i]
    }

    pub fn components(&self) -> &[Polynomial] {
        &self.components
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, PolyError> {
        self.components.iter().map(|c| c.eval(x)).collect()
    }

    pub fn add(&self, other: &PolyVector) -> Result<PolyVector, PolyError> {
        if other.len() != self.len() {
            return Err(PolyError::Arity { expected: self.len(), got: other.len() });
        }
        let components: Result<Vec<_>, _> = self
            .components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| a.add(b))
            .collect();
        Ok(PolyVector { components: components? })
    }

    pub fn scale(&self, a: f64) -> PolyVector {
        PolyVector {
            components: self.components.iter().map(|c| c.scale(a)).collect(),
        }
    }
}

/// All monomials with `min_degree <= degree <= max_degree` in graded lex
/// order. `include_constant = false` starts at degree 1.
pub fn monomial_basis(n_vars: usize, max_degree: u32, include_constant: bool) -> Vec<Monomial> {
    monomial_basis_range(n_vars, if include_constant { 0 } else { 1 }, max_degree)
}

pub fn monomial_basis_range(n_vars: usize, min_degree: u32, max_degree: u32) -> Vec<Monomial> {
    let mut out = Vec::new();
    let mut exps = vec![0u32; n_vars];
    for d in min_degree..=max_degree {
        collect_degree(n_vars, d, 0, &mut exps, &mut out);
    }
    out
}

fn collect_degree(n_vars: usize, remaining: u32, idx: usize, exps: &mut Vec<u32>, out: &mut Vec<Monomial>) {
    if idx == n_vars - 1 {
        exps[idx] = remaining;
        out.push(Monomial::new(exps.clone()));
        exps[idx] = 0;
        return;
    }
    // Lex order within a degree class: highest power on the first variable first.
    for e in (0..=remaining).rev() {
        exps[idx] = e;
        collect_degree(n_vars, remaining - e, idx + 1, exps, out);
        exps[idx] = 0;
    }
}
