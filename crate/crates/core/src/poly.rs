//! Sparse multivariate polynomials over `f64`.
//!
//! Terms are kept in a `BTreeMap` keyed by [`Monomial`], whose ordering is
//! graded lexicographic: lower total degree first, and within one degree the
//! monomial with the larger leading exponent first (`x1^2 < x1*x2 < x2^2`).
//! Every coefficient-matching system built on top of this module inherits
//! that row order, which keeps reports and solver inputs deterministic.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coefficients with magnitude below this are dropped after every operation.
pub const PRUNE_TOL: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
}

pub type Result<T> = std::result::Result<T, PolyError>;

/// Exponent vector of a single monomial, one entry per state variable.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Monomial(Vec<u32>);

impl Monomial {
    pub fn new(exponents: Vec<u32>) -> Self {
        Monomial(exponents)
    }

    pub fn one(dim: usize) -> Self {
        Monomial(vec![0; dim])
    }

    pub fn var(dim: usize, i: usize) -> Self {
        let mut e = vec![0; dim];
        e[i] = 1;
        Monomial(e)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_one(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        debug_assert_eq!(self.dim(), other.dim());
        Monomial(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(x)
            .fold(1.0, |acc, (&e, &xi)| acc * xi.powi(e as i32))
    }

    fn render(&self) -> String {
        let parts: Vec<String> = self
            .0
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > 0)
            .map(|(i, &e)| {
                if e == 1 {
                    format!("x{}", i + 1)
                } else {
                    format!("x{}^{}", i + 1, e)
                }
            })
            .collect();
        parts.join("*")
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Sorted, duplicate-free list of monomials in a fixed number of variables.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonomialBasis {
    pub dim: usize,
    pub entries: Vec<Monomial>,
}

impl MonomialBasis {
    pub fn from_monomials(dim: usize, mut entries: Vec<Monomial>) -> Self {
        entries.sort();
        entries.dedup();
        MonomialBasis { dim, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Monomial> {
        self.entries.iter()
    }

    pub fn min_degree(&self) -> Option<u32> {
        self.entries.iter().map(Monomial::degree).min()
    }

    pub fn max_degree(&self) -> Option<u32> {
        self.entries.iter().map(Monomial::degree).max()
    }

    pub fn contains(&self, m: &Monomial) -> bool {
        self.entries.binary_search(m).is_ok()
    }
}

/// All monomials in `n` variables with total degree in `[dmin, dmax]`.
pub fn monomial_basis(n: usize, dmin: u32, dmax: u32) -> MonomialBasis {
    let mut out = Vec::new();
    for d in dmin..=dmax {
        let mut cur = vec![0u32; n];
        push_with_degree(n, 0, d, &mut cur, &mut out);
    }
    MonomialBasis::from_monomials(n, out)
}

fn push_with_degree(n: usize, i: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Monomial>) {
    if n == 0 {
        if left == 0 {
            out.push(Monomial(Vec::new()));
        }
        return;
    }
    if i == n - 1 {
        cur[i] = left;
        out.push(Monomial(cur.clone()));
        cur[i] = 0;
        return;
    }
    for e in (0..=left).rev() {
        cur[i] = e;
        push_with_degree(n, i + 1, left - e, cur, out);
    }
    cur[i] = 0;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    dim: usize,
    #[serde(with = "term_list")]
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    pub fn zero(dim: usize) -> Self {
        Polynomial {
            dim,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        Self::from_terms(dim, [(Monomial::one(dim), c)])
    }

    /// The coordinate polynomial `x_{i+1}`.
    pub fn var(dim: usize, i: usize) -> Self {
        Self::from_terms(dim, [(Monomial::var(dim, i), 1.0)])
    }

    pub fn monomial(m: Monomial, c: f64) -> Self {
        let dim = m.dim();
        Self::from_terms(dim, [(m, c)])
    }

    /// Builds a polynomial, summing repeated monomials and pruning zeros.
    ///
    /// Panics if a monomial's length differs from `dim`.
    pub fn from_terms<I>(dim: usize, terms: I) -> Self
    where
        I: IntoIterator<Item = (Monomial, f64)>,
    {
        let mut map = BTreeMap::new();
        for (m, c) in terms {
            assert_eq!(m.dim(), dim, "monomial dimension mismatch");
            *map.entry(m).or_insert(0.0) += c;
        }
        let mut p = Polynomial { dim, terms: map };
        p.prune();
        p
    }

    fn prune(&mut self) {
        self.terms.retain(|_, c| c.abs() >= PRUNE_TOL);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> + '_ {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    /// Total degree; `-1` for the zero polynomial.
    pub fn degree(&self) -> i32 {
        self.terms
            .keys()
            .map(|m| m.degree() as i32)
            .max()
            .unwrap_or(-1)
    }

    /// Lowest total degree among stored terms; `None` for zero.
    pub fn min_degree(&self) -> Option<u32> {
        self.terms.keys().map(Monomial::degree).min()
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |a, c| a.max(c.abs()))
    }

    fn check_dim(&self, other: usize) -> Result<()> {
        if self.dim != other {
            return Err(PolyError::DimensionMismatch {
                expected: self.dim,
                found: other,
            });
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        Ok(self.terms.iter().map(|(m, c)| c * m.eval(x)).sum())
    }

    pub fn try_add(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_dim(other.dim)?;
        let mut terms = self.terms.clone();
        for (m, c) in &other.terms {
            *terms.entry(m.clone()).or_insert(0.0) += c;
        }
        let mut p = Polynomial {
            dim: self.dim,
            terms,
        };
        p.prune();
        Ok(p)
    }

    pub fn try_sub(&self, other: &Polynomial) -> Result<Polynomial> {
        self.try_add(&other.scale(-1.0))
    }

    pub fn try_mul(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_dim(other.dim)?;
        let mut terms: BTreeMap<Monomial, f64> = BTreeMap::new();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                *terms.entry(ma.mul(mb)).or_insert(0.0) += ca * cb;
            }
        }
        let mut p = Polynomial {
            dim: self.dim,
            terms,
        };
        p.prune();
        Ok(p)
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        let mut p = Polynomial {
            dim: self.dim,
            terms: self.terms.iter().map(|(m, c)| (m.clone(), c * s)).collect(),
        };
        p.prune();
        p
    }

    pub fn add_constant(&self, c: f64) -> Polynomial {
        self + &Polynomial::constant(self.dim, c)
    }

    /// Exact partial derivative with respect to `x_{i+1}`.
    pub fn partial(&self, i: usize) -> Polynomial {
        let terms = self.terms.iter().filter_map(|(m, c)| {
            let e = m.0[i];
            (e > 0).then(|| {
                let mut d = m.0.clone();
                d[i] -= 1;
                (Monomial(d), c * e as f64)
            })
        });
        Polynomial::from_terms(self.dim, terms)
    }

    pub fn grad(&self) -> Vec<Polynomial> {
        (0..self.dim).map(|i| self.partial(i)).collect()
    }

    /// Restriction to the terms of total degree exactly `d`.
    pub fn homogeneous_part(&self, d: u32) -> Polynomial {
        Polynomial {
            dim: self.dim,
            terms: self
                .terms
                .iter()
                .filter(|(m, _)| m.degree() == d)
                .map(|(m, c)| (m.clone(), *c))
                .collect(),
        }
    }

    pub fn quadratic_part(&self) -> Polynomial {
        self.homogeneous_part(2)
    }

    /// Symmetric matrix `N` with `p = x^T N x`, reading only the quadratic terms.
    pub fn quadratic_form_matrix(&self) -> DMatrix<f64> {
        let n = self.dim;
        let mut mat = DMatrix::zeros(n, n);
        for (m, c) in self.terms.iter().filter(|(m, _)| m.degree() == 2) {
            let idx: Vec<usize> = (0..n).filter(|&i| m.0[i] > 0).collect();
            if idx.len() == 1 {
                mat[(idx[0], idx[0])] += c;
            } else {
                mat[(idx[0], idx[1])] += c / 2.0;
                mat[(idx[1], idx[0])] += c / 2.0;
            }
        }
        mat
    }

    /// Pre-expanded evaluator for hot loops (simulation, sampling).
    pub fn compile(&self) -> CompiledPoly {
        CompiledPoly {
            dim: self.dim,
            terms: self.terms.iter().map(|(m, c)| (m.0.clone(), *c)).collect(),
        }
    }
}

/// Lie derivative `sum_i (dV/dx_i) f_i`.
pub fn lie_derivative(v: &Polynomial, f: &[Polynomial]) -> Result<Polynomial> {
    if f.len() != v.dim() {
        return Err(PolyError::DimensionMismatch {
            expected: v.dim(),
            found: f.len(),
        });
    }
    let mut out = Polynomial::zero(v.dim());
    for (i, fi) in f.iter().enumerate() {
        out = out.try_add(&v.partial(i).try_mul(fi)?)?;
    }
    Ok(out)
}

/// Expanded `(x - x*)^T N (x - x*)`; `N` must be symmetric positive definite.
pub fn affine_shift_expand(n_mat: &DMatrix<f64>, center: &[f64]) -> Result<Polynomial> {
    let n = center.len();
    if n_mat.nrows() != n || n_mat.ncols() != n {
        return Err(PolyError::DimensionMismatch {
            expected: n,
            found: n_mat.nrows(),
        });
    }
    check_spd(n_mat)?;
    let mut terms = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let nij = n_mat[(i, j)];
            if nij == 0.0 {
                continue;
            }
            let mut e = vec![0u32; n];
            e[i] += 1;
            e[j] += 1;
            terms.push((Monomial(e), nij));
        }
    }
    // linear: -2 (N x*)_i x_i
    let nx = n_mat * nalgebra::DVector::from_column_slice(center);
    for i in 0..n {
        terms.push((Monomial::var(n, i), -2.0 * nx[i]));
    }
    let c: f64 = (0..n).map(|i| center[i] * nx[i]).sum();
    terms.push((Monomial::one(n), c));
    Ok(Polynomial::from_terms(n, terms))
}

/// Symmetry (to 1e-10 relative) plus a successful Cholesky factorization.
pub fn check_spd(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(PolyError::NotSymmetric);
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return Err(PolyError::NotSymmetric);
    }
    match m.clone().cholesky() {
        Some(_) => Ok(()),
        None => Err(PolyError::NotPositiveDefinite),
    }
}

/// Flat term list for fast repeated evaluation.
#[derive(Clone, Debug)]
pub struct CompiledPoly {
    dim: usize,
    terms: Vec<(Vec<u32>, f64)>,
}

impl CompiledPoly {
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for (e, c) in &self.terms {
            let mut t = *c;
            for (k, &p) in e.iter().enumerate() {
                match p {
                    0 => {}
                    1 => t *= x[k],
                    2 => t *= x[k] * x[k],
                    _ => t *= x[k].powi(p as i32),
                }
            }
            s += t;
        }
        s
    }
}

fn fmt_coeff(c: f64) -> String {
    let a = c.abs();
    if a == 0.0 || (1e-3..1e6).contains(&a) {
        format!("{a:.5}")
    } else {
        format!("{a:.5e}")
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (k, (m, &c)) in self.terms.iter().enumerate() {
            let sign = if c < 0.0 { "-" } else { "+" };
            if k == 0 {
                if c < 0.0 {
                    write!(f, "-")?;
                }
            } else {
                write!(f, " {sign} ")?;
            }
            write!(f, "{}", fmt_coeff(c))?;
            if !m.is_one() {
                write!(f, "*{}", m.render())?;
            }
        }
        Ok(())
    }
}

impl Add for &Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: &Polynomial) -> Polynomial {
        self.try_add(rhs).expect("polynomial dimension mismatch")
    }
}

impl Sub for &Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        self.try_sub(rhs).expect("polynomial dimension mismatch")
    }
}

impl Mul for &Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: &Polynomial) -> Polynomial {
        self.try_mul(rhs).expect("polynomial dimension mismatch")
    }
}

impl Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

/// JSON form: `[{"e": [2, 0], "c": -4.0}, ...]`.
mod term_list {
    use super::Monomial;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Term {
        e: Vec<u32>,
        c: f64,
    }

    pub fn serialize<S: Serializer>(
        terms: &BTreeMap<Monomial, f64>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let v: Vec<Term> = terms
            .iter()
            .map(|(m, &c)| Term {
                e: m.exponents().to_vec(),
                c,
            })
            .collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<Monomial, f64>, D::Error> {
        let v: Vec<Term> = Vec::deserialize(d)?;
        let mut map = BTreeMap::new();
        for t in v {
            *map.entry(Monomial::new(t.e)).or_insert(0.0) += t.c;
        }
        Ok(map)
    }
}

/// Parses the JSON term-list form for a known dimension, validating lengths.
pub fn poly_from_term_json(dim: usize, v: &serde_json::Value) -> std::result::Result<Polynomial, String> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Term {
        e: Vec<u32>,
        c: f64,
    }
    let terms: Vec<Term> = serde_json::from_value(v.clone()).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(terms.len());
    for t in terms {
        if t.e.len() != dim {
            return Err(format!(
                "monomial {:?} has {} exponents, expected {dim}",
                t.e,
                t.e.len()
            ));
        }
        if !t.c.is_finite() {
            return Err("non-finite coefficient".into());
        }
        out.push((Monomial::new(t.e), t.c));
    }
    Ok(Polynomial::from_terms(dim, out))
}

/// Shorthand used by fixtures and tests: `p(2, &[([2, 0], 1.0), ([0, 2], 1.0)])`.
pub fn poly(dim: usize, terms: &[(&[u32], f64)]) -> Polynomial {
    Polynomial::from_terms(
        dim,
        terms.iter().map(|(e, c)| (Monomial::new(e.to_vec()), *c)),
    )
}
