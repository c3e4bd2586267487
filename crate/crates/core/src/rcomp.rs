//! R-function composition of certified level sets.
//!
//! A leaf stores `V` with set `{V < 1}` and evaluates to `1 - V`; the set of
//! any tree is `{R > 0}`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{monomial_basis, CompiledPoly, Polynomial};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RError {
    #[error("cannot compose an empty list of sets")]
    Empty,
    #[error("tau must lie in (0, 2], got {0}")]
    Tau(f64),
    #[error("fit degree must be even and at least 2, got {0}")]
    Degree(u32),
    #[error("fit grid must have at least 20 points per axis, got {0}")]
    Grid(usize),
    #[error("degenerate fitting box: axis {0} has zero or invalid width")]
    DegenerateBox(usize),
    #[error("normal equations are singular even with ridge regularization")]
    RankDeficient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RNode {
    Leaf { label: String, v: Polynomial },
    Not(Box<RNode>),
    And(Box<RNode>, Box<RNode>, f64),
    Or(Box<RNode>, Box<RNode>, f64),
}

/// `r1 + r2 + sqrt(r1^2 + r2^2 - tau r1 r2)`.
pub fn r_or(r1: f64, r2: f64, tau: f64) -> f64 {
    r1 + r2 + disc(r1, r2, tau).sqrt()
}

/// `r1 + r2 - sqrt(r1^2 + r2^2 - tau r1 r2)`.
pub fn r_and(r1: f64, r2: f64, tau: f64) -> f64 {
    r1 + r2 - disc(r1, r2, tau).sqrt()
}

fn disc(r1: f64, r2: f64, tau: f64) -> f64 {
    // (r1 - r2)^2 + (2 - tau) r1 r2, written to stay non-negative at tau = 2
    let d = r1 - r2;
    (d * d + (2.0 - tau) * r1 * r2).max(0.0)
}

impl RNode {
    pub fn leaf(label: impl Into<String>, v: Polynomial) -> Self {
        RNode::Leaf { label: label.into(), v }
    }

    pub fn or(a: RNode, b: RNode, tau: f64) -> Result<Self, RError> {
        check_tau(tau)?;
        Ok(RNode::Or(Box::new(a), Box::new(b), tau))
    }

    pub fn and(a: RNode, b: RNode, tau: f64) -> Result<Self, RError> {
        check_tau(tau)?;
        Ok(RNode::And(Box::new(a), Box::new(b), tau))
    }

    pub fn dim(&self) -> usize {
        match self {
            RNode::Leaf { v, .. } => v.dim(),
            RNode::Not(c) => c.dim(),
            RNode::And(a, _, _) | RNode::Or(a, _, _) => a.dim(),
        }
    }

    pub fn leaves(&self) -> Vec<&Polynomial> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a Polynomial>) {
        match self {
            RNode::Leaf { v, .. } => out.push(v),
            RNode::Not(c) => c.collect(out),
            RNode::And(a, b, _) | RNode::Or(a, b, _) => {
                a.collect(out);
                b.collect(out);
            }
        }
    }

    /// Tree with leaf polynomials compiled for repeated evaluation.
    pub fn compile(&self) -> CompiledR {
        match self {
            RNode::Leaf { v, .. } => CompiledR::Leaf(v.compile()),
            RNode::Not(c) => CompiledR::Not(Box::new(c.compile())),
            RNode::And(a, b, t) => CompiledR::And(Box::new(a.compile()), Box::new(b.compile()), *t),
            RNode::Or(a, b, t) => CompiledR::Or(Box::new(a.compile()), Box::new(b.compile()), *t),
        }
    }
}

fn check_tau(tau: f64) -> Result<(), RError> {
    if tau > 0.0 && tau <= 2.0 {
        Ok(())
    } else {
        Err(RError::Tau(tau))
    }
}

impl fmt::Display for RNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RNode::Leaf { label, .. } => write!(f, "1 - {label}"),
            RNode::Not(c) => write!(f, "-({c})"),
            RNode::And(a, b, _) => write!(f, "R_and({a}, {b})"),
            RNode::Or(a, b, _) => write!(f, "R_or({a}, {b})"),
        }
    }
}

#[derive(Clone, Debug)]
pub enum CompiledR {
    Leaf(CompiledPoly),
    Not(Box<CompiledR>),
    And(Box<CompiledR>, Box<CompiledR>, f64),
    Or(Box<CompiledR>, Box<CompiledR>, f64),
}

impl CompiledR {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            CompiledR::Leaf(v) => 1.0 - v.eval(x),
            CompiledR::Not(c) => -c.eval(x),
            CompiledR::And(a, b, t) => r_and(a.eval(x), b.eval(x), *t),
            CompiledR::Or(a, b, t) => r_or(a.eval(x), b.eval(x), *t),
        }
    }
}

pub fn r_eval(node: &RNode, x: &[f64]) -> f64 {
    match node {
        RNode::Leaf { v, .. } => 1.0 - v.eval(x).expect("point dimension matches the tree"),
        RNode::Not(c) => -r_eval(c, x),
        RNode::And(a, b, t) => r_and(r_eval(a, x), r_eval(b, x), *t),
        RNode::Or(a, b, t) => r_or(r_eval(a, x), r_eval(b, x), *t),
    }
}

/// Left fold of `Or` over the leaves `1 - V_i`, in the given order.
pub fn compose_union(leaves: &[(String, Polynomial)], tau: f64) -> Result<RNode, RError> {
    check_tau(tau)?;
    let mut it = leaves.iter();
    let (l, v) = it.next().ok_or(RError::Empty)?;
    let mut acc = RNode::leaf(l.clone(), v.clone());
    for (l, v) in it {
        acc = RNode::or(acc, RNode::leaf(l.clone(), v.clone()), tau)?;
    }
    Ok(acc)
}

/// Least-squares polynomial fit of a tree. Not a certificate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    pub poly: Polynomial,
    /// Fraction of grid points where the fit and the tree agree in sign.
    pub sign_agreement: f64,
    pub rms_error: f64,
    pub ridge: bool,
}

pub fn poly_approx(node: &RNode, bounds: &[(f64, f64)], degree: u32, grid: usize) -> Result<PolyFit, RError> {
    if degree < 2 || degree % 2 == 1 {
        return Err(RError::Degree(degree));
    }
    if grid < 20 {
        return Err(RError::Grid(grid));
    }
    let n = node.dim();
    for (i, &(lo, hi)) in bounds.iter().enumerate() {
        if !(hi > lo && lo.is_finite() && hi.is_finite()) {
            return Err(RError::DegenerateBox(i));
        }
    }
    let basis = monomial_basis(n, 0, degree);
    let r = node.compile();
    let total = grid.pow(n as u32);
    let mut points = Vec::with_capacity(total);
    for k in 0..total {
        let mut rem = k;
        let x: Vec<f64> = bounds
            .iter()
            .map(|&(lo, hi)| {
                let j = rem % grid;
                rem /= grid;
                lo + (hi - lo) * j as f64 / (grid - 1) as f64
            })
            .collect();
        points.push(x);
    }
    let target: Vec<f64> = points.iter().map(|x| r.eval(x)).collect();
    let a = DMatrix::from_fn(total, basis.len(), |i, j| basis.entries[j].eval(&points[i]));
    let scale: Vec<f64> = a.column_iter().map(|c| c.norm().max(1e-300)).collect();
    let mut a_s = a.clone();
    for (j, mut c) in a_s.column_iter_mut().enumerate() {
        c /= scale[j];
    }
    let b = DVector::from_vec(target.clone());
    let ata = a_s.transpose() * &a_s;
    let atb = a_s.transpose() * &b;
    let (coef_s, ridge) = match ata.clone().cholesky() {
        Some(ch) if well_conditioned(&ata) => (ch.solve(&atb), false),
        _ => {
            let m = &ata + DMatrix::identity(basis.len(), basis.len()) * 1e-10;
            (m.cholesky().ok_or(RError::RankDeficient)?.solve(&atb), true)
        }
    };
    let coef: Vec<f64> = coef_s.iter().zip(&scale).map(|(c, s)| c / s).collect();
    let poly = Polynomial::from_terms(n, basis.entries.iter().cloned().zip(coef.iter().copied()));
    let fitted = &a * DVector::from_vec(coef);
    let zero = 1e-9 * target.iter().fold(1.0f64, |m, t| m.max(t.abs()));
    let mut agree = 0usize;
    let mut sq = 0.0;
    for (fv, tv) in fitted.iter().zip(&target) {
        // points on the boundary itself have no sign to match
        if (*fv > 0.0) == (*tv > 0.0) || tv.abs() <= zero {
            agree += 1;
        }
        sq += (fv - tv) * (fv - tv);
    }
    Ok(PolyFit {
        poly,
        sign_agreement: agree as f64 / total as f64,
        rms_error: (sq / total as f64).sqrt(),
        ridge,
    })
}

fn well_conditioned(m: &DMatrix<f64>) -> bool {
    let eig = m.clone().symmetric_eigen().eigenvalues;
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &e| (l.min(e), h.max(e.abs())));
    lo > 1e-13 * hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::poly;
    use proptest::prelude::*;

    fn disk(r2: f64) -> Polynomial {
        poly(2, &[(&[2, 0], 1.0 / r2), (&[0, 2], 1.0 / r2)])
    }

    #[test]
    fn tau_two_extremes() {
        assert_eq!(r_or(3.0, 1.0, 2.0), 6.0);
        assert_eq!(r_and(3.0, 1.0, 2.0), 2.0);
    }

    #[test]
    fn crossed_ellipses() {
        let a = RNode::leaf("V1", poly(2, &[(&[2, 0], 1.0), (&[0, 2], 9.0)]));
        let b = RNode::leaf("V2", poly(2, &[(&[2, 0], 9.0), (&[0, 2], 1.0)]));
        let u = RNode::or(a, b, 2.0).unwrap();
        assert!(r_eval(&u, &[0.0, 0.0]) > 0.0);
        assert!(r_eval(&u, &[0.9, 0.9]) < 0.0);
        assert!(r_eval(&u, &[0.9, 0.0]) > 0.0);
        assert!(r_eval(&RNode::Not(Box::new(u.clone())), &[0.9, 0.9]) > 0.0);
        assert_eq!(u.to_string(), "R_or(1 - V1, 1 - V2)");
    }

    #[test]
    fn union_nesting() {
        let leaves: Vec<_> = (0..3).map(|k| (format!("V{k}"), disk(1.0 + k as f64))).collect();
        let r = compose_union(&leaves, 2.0).unwrap();
        assert_eq!(r.to_string(), "R_or(R_or(1 - V0, 1 - V1), 1 - V2)");
        assert!(matches!(compose_union(&leaves[..1], 2.0).unwrap(), RNode::Leaf { .. }));
        assert_eq!(compose_union(&[], 2.0), Err(RError::Empty));
        assert_eq!(compose_union(&leaves, 2.5), Err(RError::Tau(2.5)));
    }

    #[test]
    fn fit_recovers_polynomial() {
        let r = RNode::leaf("V", disk(1.0));
        let fit = poly_approx(&r, &[(-2.0, 2.0), (-2.0, 2.0)], 2, 21).unwrap();
        let want = poly(2, &[(&[0, 0], 1.0), (&[2, 0], -1.0), (&[0, 2], -1.0)]);
        let diff = &fit.poly - &want;
        assert!(diff.max_abs_coeff() <= 1e-8, "{}", fit.poly);
        assert_eq!(fit.sign_agreement, 1.0);
    }

    #[test]
    fn fit_of_doubled_leaf() {
        let v = poly(2, &[(&[2, 0], 1.0), (&[1, 1], 0.3), (&[0, 2], 2.0)]);
        let u = RNode::or(RNode::leaf("a", v.clone()), RNode::leaf("b", v.clone()), 2.0).unwrap();
        let fit = poly_approx(&u, &[(-1.0, 1.0), (-1.0, 1.0)], 2, 20).unwrap();
        let want = (&Polynomial::constant(2, 1.0) - &v).scale(2.0);
        assert!((&fit.poly - &want).max_abs_coeff() < 1e-8);
    }

    #[test]
    fn fit_arguments() {
        let r = RNode::leaf("V", disk(1.0));
        let b = [(-1.0, 1.0), (-1.0, 1.0)];
        assert_eq!(poly_approx(&r, &b, 3, 20), Err(RError::Degree(3)));
        assert_eq!(poly_approx(&r, &b, 2, 5), Err(RError::Grid(5)));
        assert_eq!(poly_approx(&r, &[(0.0, 0.0), (-1.0, 1.0)], 2, 20), Err(RError::DegenerateBox(0)));
    }

    #[test]
    fn union_set_is_order_free_at_tau_two() {
        let leaves: Vec<_> = [disk(1.0), poly(2, &[(&[2, 0], 4.0), (&[0, 2], 0.1)]), disk(0.3)]
            .into_iter()
            .enumerate()
            .map(|(k, v)| (format!("V{k}"), v))
            .collect();
        let mut rev = leaves.clone();
        rev.reverse();
        let a = compose_union(&leaves, 2.0).unwrap().compile();
        let b = compose_union(&rev, 2.0).unwrap().compile();
        for k in 0..200 {
            let x = [(k as f64 * 0.37).sin() * 3.0, (k as f64 * 0.91).cos() * 3.0];
            assert_eq!(a.eval(&x) > 0.0, b.eval(&x) > 0.0);
        }
    }

    proptest! {
        #[test]
        fn tau_two_is_twice_max_min(r1 in -1e3f64..1e3, r2 in -1e3f64..1e3) {
            let tol = 1e-12 * (r1.abs() + r2.abs() + 1.0);
            prop_assert!((r_or(r1, r2, 2.0) - 2.0 * r1.max(r2)).abs() <= tol);
            prop_assert!((r_and(r1, r2, 2.0) - 2.0 * r1.min(r2)).abs() <= tol);
        }

        #[test]
        fn positive_union_means_membership(tau in 0.05f64..2.0, x in -2.0f64..2.0, y in -2.0f64..2.0) {
            let a = poly(2, &[(&[2, 0], 1.0), (&[0, 2], 4.0)]);
            let b = poly(2, &[(&[2, 0], 3.0), (&[1, 1], 0.5), (&[0, 2], 0.5)]);
            let u = RNode::or(RNode::leaf("a", a.clone()), RNode::leaf("b", b.clone()), tau).unwrap();
            let i = RNode::and(RNode::leaf("a", a.clone()), RNode::leaf("b", b.clone()), tau).unwrap();
            let (va, vb) = (a.eval(&[x, y]).unwrap(), b.eval(&[x, y]).unwrap());
            if r_eval(&u, &[x, y]) > 0.0 {
                prop_assert!(va < 1.0 || vb < 1.0);
            }
            if r_eval(&i, &[x, y]) > 0.0 {
                prop_assert!(va < 1.0 && vb < 1.0);
            }
        }
    }
}
