//! SOS feasibility programs compiled to [`SdpProblem`]s.
//!
//! A constraint is an affine polynomial expression
//! `known + sum_k action_k(var_k)` that must be a sum of squares. Unknown
//! polynomials are either free (coefficients are scalar decision variables)
//! or SOS (parameterized by their own Gram matrix). Each constraint gets a
//! Gram block over the full monomial window `[ceil(dmin/2), floor(dmax/2)]`
//! of the assembled expression, and one equality row per monomial.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{lie_derivative, monomial_basis, Monomial, MonomialBasis, PolyError, Polynomial};
use crate::sdp::{self, min_eigenvalue, Equality, SdpError, SdpOptions, SdpProblem, SdpStatus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SosError {
    #[error("constraint `{0}` has odd maximal degree {1}")]
    OddDegree(String, i32),
    #[error("constraint `{0}` has an empty Gram basis")]
    EmptyGramBasis(String),
    #[error("multiplier degree budget violated: {0}")]
    DegreeBudget(String),
    #[error("certificate shape does not match the program: {0}")]
    ShapeMismatch(String),
    #[error("solver reported feasible but the certificate failed validation (residual {residual:.3e}, min eig {min_eig:.3e})")]
    ValidationFailed { residual: f64, min_eig: f64 },
    #[error(transparent)]
    Sdp(#[from] SdpError),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VarId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarKind {
    Free,
    Sos,
}

/// An unknown polynomial. For `Free` the basis lists its monomials; for `Sos`
/// it is the Gram basis `Z` with `s = Z^T S Z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyVar {
    pub name: String,
    pub kind: VarKind,
    pub basis: MonomialBasis,
}

/// Linear map applied to an unknown inside a constraint.
#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    /// `var * g`
    Mul(Polynomial),
    /// `scale * (grad var) . field`
    Lie { field: Vec<Polynomial>, scale: f64 },
}

impl Action {
    pub fn apply(&self, p: &Polynomial) -> Result<Polynomial, PolyError> {
        match self {
            Action::Mul(g) => p.try_mul(g),
            Action::Lie { field, scale } => Ok(lie_derivative(p, field)?.scale(*scale)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SosConstraint {
    pub name: String,
    pub known: Polynomial,
    pub terms: Vec<(VarId, Action)>,
}

impl SosConstraint {
    pub fn new(name: impl Into<String>, known: Polynomial) -> Self {
        SosConstraint {
            name: name.into(),
            known,
            terms: Vec::new(),
        }
    }

    pub fn with(mut self, var: VarId, action: Action) -> Self {
        self.terms.push((var, action));
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SosProgram {
    pub dim: usize,
    pub vars: Vec<PolyVar>,
    pub constraints: Vec<SosConstraint>,
    /// Linear objective (minimized) over free-variable coefficients.
    pub objective: Vec<(VarId, Monomial, f64)>,
}

/// Certificate tolerances. The identity tolerance is relative:
/// `identity_residual <= cert_tol * max(1, max |coefficient|)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SosOptions {
    pub sdp: SdpOptions,
    pub cert_tol: f64,
    pub gram_eig_tol: f64,
}

impl Default for SosOptions {
    fn default() -> Self {
        SosOptions {
            sdp: SdpOptions::default(),
            cert_tol: 1e-6,
            gram_eig_tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramWitness {
    pub name: String,
    pub basis: MonomialBasis,
    #[serde(with = "crate::serde_matrix")]
    pub gram: DMatrix<f64>,
    /// The assembled polynomial that `Z^T Q Z` must reproduce.
    pub expression: Polynomial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarValue {
    pub name: String,
    pub kind: VarKind,
    pub basis: MonomialBasis,
    /// Gram matrix for `Sos` variables; empty for `Free`.
    #[serde(with = "crate::serde_matrix")]
    pub gram: DMatrix<f64>,
    pub poly: Polynomial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SosCertificate {
    pub constraints: Vec<GramWitness>,
    pub values: Vec<VarValue>,
    pub identity_residual: f64,
    pub min_eig: f64,
}

impl SosCertificate {
    pub fn value(&self, id: VarId) -> &Polynomial {
        &self.values[id.0].poly
    }

    /// `theta * self + (1 - theta) * other` for two certificates of the same
    /// program. Convex combinations of feasible points stay feasible.
    pub fn blend(&self, other: &SosCertificate, theta: f64) -> SosCertificate {
        let mix_m = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
            if a.shape() == b.shape() {
                a * theta + b * (1.0 - theta)
            } else {
                a.clone()
            }
        };
        let mix_p = |a: &Polynomial, b: &Polynomial| &a.scale(theta) + &b.scale(1.0 - theta);
        SosCertificate {
            constraints: self
                .constraints
                .iter()
                .zip(&other.constraints)
                .map(|(a, b)| GramWitness {
                    gram: mix_m(&a.gram, &b.gram),
                    expression: mix_p(&a.expression, &b.expression),
                    ..a.clone()
                })
                .collect(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| VarValue {
                    gram: mix_m(&a.gram, &b.gram),
                    poly: mix_p(&a.poly, &b.poly),
                    ..a.clone()
                })
                .collect(),
            identity_residual: self.identity_residual.max(other.identity_residual),
            min_eig: self.min_eig.min(other.min_eig),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub ok: bool,
    pub identity_residual: f64,
    pub min_eig: f64,
}

#[derive(Clone, Debug)]
pub struct SosSolution {
    pub status: SdpStatus,
    pub certificate: Option<SosCertificate>,
    pub phase1_t: f64,
    /// See [`sdp::SdpSolution::objective_estimate`].
    pub objective_estimate: f64,
}

/// SDP problem together with the bookkeeping needed to read a certificate
/// back out of its solution.
#[derive(Clone, Debug)]
pub struct Compiled {
    pub sdp: SdpProblem,
    pub gram_bases: Vec<MonomialBasis>,
    /// SDP block of each SOS variable / offset of each free variable.
    pub var_slots: Vec<usize>,
    /// Monomial of each equality row, with its constraint index.
    pub row_monomials: Vec<(usize, Monomial)>,
}

fn gram_basis_polys(basis: &MonomialBasis) -> Vec<(usize, usize, Polynomial)> {
    let mut out = Vec::new();
    for a in 0..basis.len() {
        for b in a..basis.len() {
            out.push((
                a,
                b,
                Polynomial::monomial(basis.entries[a].mul(&basis.entries[b]), 1.0),
            ));
        }
    }
    out
}

/// Polynomial `Z^T Q Z`.
pub fn gram_to_poly(basis: &MonomialBasis, q: &DMatrix<f64>) -> Polynomial {
    let mut terms = Vec::new();
    for a in 0..basis.len() {
        for b in 0..basis.len() {
            terms.push((basis.entries[a].mul(&basis.entries[b]), q[(a, b)]));
        }
    }
    Polynomial::from_terms(basis.dim, terms)
}

impl SosProgram {
    pub fn new(dim: usize) -> Self {
        SosProgram {
            dim,
            vars: Vec::new(),
            constraints: Vec::new(),
            objective: Vec::new(),
        }
    }

    pub fn free_var(&mut self, name: impl Into<String>, basis: MonomialBasis) -> VarId {
        self.vars.push(PolyVar {
            name: name.into(),
            kind: VarKind::Free,
            basis,
        });
        VarId(self.vars.len() - 1)
    }

    /// SOS unknown of even degree `degree`; `no_constant` drops the constant
    /// monomial from its Gram basis so the polynomial vanishes at the origin.
    pub fn sos_var(&mut self, name: impl Into<String>, degree: u32, no_constant: bool) -> VarId {
        let lo = u32::from(no_constant);
        let basis = monomial_basis(self.dim, lo, degree / 2);
        self.vars.push(PolyVar {
            name: name.into(),
            kind: VarKind::Sos,
            basis,
        });
        VarId(self.vars.len() - 1)
    }

    pub fn add(&mut self, c: SosConstraint) {
        self.constraints.push(c);
    }

    fn images(&self, var: &PolyVar, action: &Action) -> Result<Vec<Polynomial>, PolyError> {
        match var.kind {
            VarKind::Free => var
                .basis
                .iter()
                .map(|m| action.apply(&Polynomial::monomial(m.clone(), 1.0)))
                .collect(),
            VarKind::Sos => gram_basis_polys(&var.basis)
                .iter()
                .map(|(_, _, p)| action.apply(p))
                .collect(),
        }
    }

    pub fn compile(&self) -> Result<Compiled, SosError> {
        let s2 = std::f64::consts::SQRT_2;
        // per-constraint images and Gram bases
        let mut all_images = Vec::with_capacity(self.constraints.len());
        let mut gram_bases = Vec::with_capacity(self.constraints.len());
        for c in &self.constraints {
            if c.known.dim() != self.dim {
                return Err(PolyError::DimensionMismatch {
                    expected: self.dim,
                    found: c.known.dim(),
                }
                .into());
            }
            let mut imgs = Vec::with_capacity(c.terms.len());
            let mut lo = c.known.min_degree().map(|d| d as i32).unwrap_or(i32::MAX);
            let mut hi = c.known.degree();
            for (id, action) in &c.terms {
                let im = self.images(&self.vars[id.0], action)?;
                for p in &im {
                    if !p.is_zero() {
                        lo = lo.min(p.min_degree().unwrap() as i32);
                        hi = hi.max(p.degree());
                    }
                }
                imgs.push(im);
            }
            if hi < 0 {
                return Err(SosError::EmptyGramBasis(c.name.clone()));
            }
            if hi % 2 == 1 {
                return Err(SosError::OddDegree(c.name.clone(), hi));
            }
            let basis = monomial_basis(self.dim, (lo as u32).div_ceil(2), hi as u32 / 2);
            if basis.is_empty() {
                return Err(SosError::EmptyGramBasis(c.name.clone()));
            }
            gram_bases.push(basis);
            all_images.push(imgs);
        }

        let mut blocks: Vec<usize> = gram_bases.iter().map(MonomialBasis::len).collect();
        let mut var_slots = vec![0; self.vars.len()];
        let mut n_free = 0;
        for (k, v) in self.vars.iter().enumerate() {
            match v.kind {
                VarKind::Sos => {
                    var_slots[k] = blocks.len();
                    blocks.push(v.basis.len());
                }
                VarKind::Free => {
                    var_slots[k] = n_free;
                    n_free += v.basis.len();
                }
            }
        }
        let mut sdp = SdpProblem::new(blocks, n_free);
        let mut row_monomials = Vec::new();

        for (ci, c) in self.constraints.iter().enumerate() {
            let mut rows: BTreeMap<Monomial, Vec<(usize, f64)>> = BTreeMap::new();
            let basis = &gram_bases[ci];
            for a in 0..basis.len() {
                for b in a..basis.len() {
                    let m = basis.entries[a].mul(&basis.entries[b]);
                    let w = if a == b { 1.0 } else { s2 };
                    rows.entry(m).or_default().push((sdp.var_index(ci, a, b), w));
                }
            }
            for ((id, _), imgs) in c.terms.iter().zip(&all_images[ci]) {
                let var = &self.vars[id.0];
                match var.kind {
                    VarKind::Free => {
                        for (j, img) in imgs.iter().enumerate() {
                            let col = sdp.free_index(var_slots[id.0] + j);
                            for (m, coef) in img.terms() {
                                rows.entry(m.clone()).or_default().push((col, -coef));
                            }
                        }
                    }
                    VarKind::Sos => {
                        let block = var_slots[id.0];
                        let pairs = gram_basis_polys(&var.basis);
                        for ((a, b, _), img) in pairs.iter().zip(imgs) {
                            let col = sdp.var_index(block, *a, *b);
                            let w = if a == b { 1.0 } else { s2 };
                            for (m, coef) in img.terms() {
                                rows.entry(m.clone()).or_default().push((col, -coef * w));
                            }
                        }
                    }
                }
            }
            for (m, _) in c.known.terms() {
                rows.entry(m.clone()).or_default();
            }
            for (m, terms) in rows {
                let rhs = c.known.coeff(&m);
                let terms: Vec<(usize, f64)> = merge_terms(terms);
                if terms.is_empty() && rhs == 0.0 {
                    continue;
                }
                sdp.equalities.push(Equality { terms, rhs });
                row_monomials.push((ci, m));
            }
        }

        for (id, m, c) in &self.objective {
            let var = &self.vars[id.0];
            if var.kind != VarKind::Free {
                return Err(SosError::ShapeMismatch(format!(
                    "objective references SOS variable `{}`",
                    var.name
                )));
            }
            let j = var.basis.entries.binary_search(m).map_err(|_| {
                SosError::ShapeMismatch(format!("monomial not in basis of `{}`", var.name))
            })?;
            sdp.objective
                .push((sdp.free_index(var_slots[id.0] + j), *c));
        }

        Ok(Compiled {
            sdp,
            gram_bases,
            var_slots,
            row_monomials,
        })
    }

    /// Reads a certificate out of a solver solution (no validation).
    pub fn extract(&self, compiled: &Compiled, sol: &sdp::SdpSolution) -> Result<SosCertificate, SosError> {
        let mut values = Vec::with_capacity(self.vars.len());
        for (k, v) in self.vars.iter().enumerate() {
            let slot = compiled.var_slots[k];
            match v.kind {
                VarKind::Free => {
                    let coeffs = &sol.free_values[slot..slot + v.basis.len()];
                    let poly = Polynomial::from_terms(
                        self.dim,
                        v.basis.iter().cloned().zip(coeffs.iter().cloned()),
                    );
                    values.push(VarValue {
                        name: v.name.clone(),
                        kind: v.kind,
                        basis: v.basis.clone(),
                        gram: DMatrix::zeros(0, 0),
                        poly,
                    });
                }
                VarKind::Sos => {
                    let gram = sol.blocks[slot].clone();
                    values.push(VarValue {
                        name: v.name.clone(),
                        kind: v.kind,
                        basis: v.basis.clone(),
                        poly: gram_to_poly(&v.basis, &gram),
                        gram,
                    });
                }
            }
        }
        let mut constraints = Vec::with_capacity(self.constraints.len());
        for (ci, c) in self.constraints.iter().enumerate() {
            constraints.push(GramWitness {
                name: c.name.clone(),
                basis: compiled.gram_bases[ci].clone(),
                gram: sol.blocks[ci].clone(),
                expression: self.assemble(c, &values)?,
            });
        }
        let mut cert = SosCertificate {
            constraints,
            values,
            identity_residual: f64::NAN,
            min_eig: f64::NAN,
        };
        let v = validate(&cert, self, &SosOptions::default())?;
        cert.identity_residual = v.identity_residual;
        cert.min_eig = v.min_eig;
        Ok(cert)
    }

    fn assemble(&self, c: &SosConstraint, values: &[VarValue]) -> Result<Polynomial, SosError> {
        let mut e = c.known.clone();
        for (id, action) in &c.terms {
            e = e.try_add(&action.apply(&values[id.0].poly)?)?;
        }
        Ok(e)
    }

    /// Compiles, solves and validates. A `Feasible` status always comes with
    /// a certificate that passed [`validate`].
    pub fn solve(&self, opts: &SosOptions) -> Result<SosSolution, SosError> {
        let compiled = self.compile()?;
        let sol = sdp::solve(&compiled.sdp, &opts.sdp)?;
        if sol.status != SdpStatus::Feasible {
            return Ok(SosSolution {
                status: sol.status,
                certificate: None,
                phase1_t: sol.phase1_t,
                objective_estimate: sol.objective_estimate,
            });
        }
        let cert = self.extract(&compiled, &sol)?;
        let v = validate(&cert, self, opts)?;
        if !v.ok {
            return Err(SosError::ValidationFailed {
                residual: v.identity_residual,
                min_eig: v.min_eig,
            });
        }
        Ok(SosSolution {
            status: SdpStatus::Feasible,
            certificate: Some(cert),
            phase1_t: sol.phase1_t,
            objective_estimate: sol.objective_estimate,
        })
    }
}

fn merge_terms(mut terms: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    terms.sort_by_key(|t| t.0);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(terms.len());
    for (k, c) in terms {
        match out.last_mut() {
            Some(last) if last.0 == k => last.1 += c,
            _ => out.push((k, c)),
        }
    }
    out.retain(|t| t.1 != 0.0);
    out
}

/// Checks one Gram witness against its polynomial: returns the raw maximal
/// coefficient mismatch, the scale `max(1, max |coefficient|)` and the
/// smallest Gram eigenvalue.
pub fn check_gram(basis: &MonomialBasis, gram: &DMatrix<f64>, target: &Polynomial) -> Result<(f64, f64, f64), SosError> {
    if gram.nrows() != basis.len() || gram.ncols() != basis.len() {
        return Err(SosError::ShapeMismatch(format!(
            "Gram is {}x{}, basis has {} entries",
            gram.nrows(),
            gram.ncols(),
            basis.len()
        )));
    }
    let zqz = gram_to_poly(basis, gram);
    let diff = zqz.try_sub(target)?;
    let scale = target.max_abs_coeff().max(1.0);
    let min_eig = if basis.is_empty() {
        0.0
    } else {
        min_eigenvalue(gram)?
    };
    Ok((diff.max_abs_coeff(), scale, min_eig))
}

/// Re-expands every `Z^T Q Z` symbolically, recomputes each constraint's
/// expression from the variable values, and checks Gram eigenvalues.
pub fn validate(cert: &SosCertificate, program: &SosProgram, opts: &SosOptions) -> Result<Validation, SosError> {
    if cert.constraints.len() != program.constraints.len() || cert.values.len() != program.vars.len() {
        return Err(SosError::ShapeMismatch(format!(
            "certificate has {} constraints / {} values, program has {} / {}",
            cert.constraints.len(),
            cert.values.len(),
            program.constraints.len(),
            program.vars.len()
        )));
    }
    let mut ok = true;
    let mut worst_res: f64 = 0.0;
    let mut min_eig = f64::INFINITY;
    let mut values = cert.values.clone();
    for (val, var) in values.iter_mut().zip(&program.vars) {
        if val.kind != var.kind || val.basis != var.basis {
            return Err(SosError::ShapeMismatch(format!("variable `{}`", var.name)));
        }
        if val.kind == VarKind::Sos {
            let (res, scale, eig) = check_gram(&val.basis, &val.gram, &val.poly)?;
            // the polynomial is defined by the Gram matrix
            val.poly = gram_to_poly(&val.basis, &val.gram);
            ok &= res <= opts.cert_tol * scale;
            ok &= eig >= -opts.gram_eig_tol;
            min_eig = min_eig.min(eig);
        }
    }
    for (w, c) in cert.constraints.iter().zip(&program.constraints) {
        let expr = program.assemble(c, &values)?;
        let (res, scale, eig) = check_gram(&w.basis, &w.gram, &expr)?;
        worst_res = worst_res.max(res);
        min_eig = min_eig.min(eig);
        ok &= res <= opts.cert_tol * scale;
        ok &= eig >= -opts.gram_eig_tol;
    }
    Ok(Validation {
        ok,
        identity_residual: worst_res,
        min_eig,
    })
}

/// Generalized S-procedure: `g0 - sum s_i g_i` SOS with SOS multipliers
/// `s_i` of the given even degrees, certifying `{g_i >= 0} ⊆ {g0 >= 0}`.
/// Every product `s_i g_i` must stay within `max_degree`.
pub fn s_procedure(
    g0: &Polynomial,
    gs: &[Polynomial],
    s_degrees: &[u32],
    max_degree: u32,
) -> Result<(SosProgram, Vec<VarId>), SosError> {
    if gs.len() != s_degrees.len() {
        return Err(SosError::DegreeBudget(format!(
            "{} constraints but {} multiplier degrees",
            gs.len(),
            s_degrees.len()
        )));
    }
    let mut prog = SosProgram::new(g0.dim());
    let mut c = SosConstraint::new("s-procedure", g0.clone());
    let mut ids = Vec::new();
    for (k, (g, &d)) in gs.iter().zip(s_degrees).enumerate() {
        if d % 2 == 1 {
            return Err(SosError::DegreeBudget(format!("multiplier {k} has odd degree {d}")));
        }
        if g.degree().max(0) as u32 + d > max_degree {
            return Err(SosError::DegreeBudget(format!(
                "deg s{k} + deg g{k} = {} exceeds {max_degree}",
                g.degree().max(0) as u32 + d
            )));
        }
        let s = prog.sos_var(format!("s{}", k + 1), d, false);
        c = c.with(s, Action::Mul(g.scale(-1.0)));
        ids.push(s);
    }
    prog.add(c);
    Ok((prog, ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::poly;

    fn single(p: Polynomial) -> SosProgram {
        let mut prog = SosProgram::new(p.dim());
        prog.add(SosConstraint::new("p", p));
        prog
    }

    #[test]
    fn perfect_square_decomposition() {
        // (x1 + x2)^2 + x2^2
        let p = poly(2, &[(&[2, 0], 1.0), (&[1, 1], 2.0), (&[0, 2], 2.0)]);
        let prog = single(p.clone());
        let sol = prog.solve(&SosOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Feasible);
        let cert = sol.certificate.unwrap();
        let q = &cert.constraints[0].gram;
        let want = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0]);
        assert!((q - want).amax() < 1e-7, "{q}");
        let v = validate(&cert, &prog, &SosOptions::default()).unwrap();
        assert!(v.ok);
        assert!(v.identity_residual <= 1e-9);
    }

    #[test]
    fn motzkin_is_not_sos() {
        let p = poly(
            2,
            &[(&[4, 2], 1.0), (&[2, 4], 1.0), (&[2, 2], -3.0), (&[0, 0], 1.0)],
        );
        let sol = single(p).solve(&SosOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Infeasible);
        assert!(sol.phase1_t > 1e-4, "phase-I optimum {}", sol.phase1_t);
    }

    #[test]
    fn negative_definite_is_not_sos() {
        let p = poly(2, &[(&[2, 0], -1.0), (&[0, 2], -1.0)]);
        let sol = single(p).solve(&SosOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Infeasible);
    }

    #[test]
    fn odd_degree_and_empty_rejected() {
        let p = poly(1, &[(&[3], 1.0)]);
        assert!(matches!(single(p).compile(), Err(SosError::OddDegree(_, 3))));
        assert!(matches!(
            single(Polynomial::zero(1)).compile(),
            Err(SosError::EmptyGramBasis(_))
        ));
    }

    #[test]
    fn s_procedure_constant_multiplier() {
        // {1 - x^2 >= 0} ⊆ {4 - x^2 >= 0}
        let g0 = poly(1, &[(&[0], 4.0), (&[2], -1.0)]);
        let g1 = poly(1, &[(&[0], 1.0), (&[2], -1.0)]);
        let (prog, ids) = s_procedure(&g0, &[g1], &[0], 2).unwrap();
        let sol = prog.solve(&SosOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Feasible);
        let s = sol.certificate.unwrap().value(ids[0]).clone();
        assert!(s.degree() <= 0);
        assert!(s.coeff(&Monomial::one(1)) >= 0.0);
        assert!(matches!(
            s_procedure(&g0, &[poly(1, &[(&[2], 1.0)])], &[2], 3),
            Err(SosError::DegreeBudget(_))
        ));
    }

    #[test]
    fn s_procedure_disjoint_sets_infeasible() {
        // {1 - x^2 >= 0} is disjoint from {x - 2 >= 0}
        let g0 = poly(1, &[(&[1], 1.0), (&[0], -2.0)]);
        let g1 = poly(1, &[(&[0], 1.0), (&[2], -1.0)]);
        for d in [0, 2] {
            let (prog, _) = s_procedure(&g0, &[g1.clone()], &[d], 4).unwrap();
            match prog.compile() {
                Err(SosError::OddDegree(..)) => continue,
                Err(e) => panic!("{e}"),
                Ok(_) => {}
            }
            let sol = prog.solve(&SosOptions::default()).unwrap();
            assert_ne!(sol.status, SdpStatus::Feasible, "degree {d}");
        }
    }

    #[test]
    fn perturbed_certificate_fails_validation() {
        let p = poly(2, &[(&[2, 0], 1.0), (&[1, 1], 2.0), (&[0, 2], 2.0)]);
        let prog = single(p);
        let mut cert = prog.solve(&SosOptions::default()).unwrap().certificate.unwrap();
        cert.constraints[0].gram[(0, 0)] += 1e-3;
        let v = validate(&cert, &prog, &SosOptions::default()).unwrap();
        assert!(!v.ok);
        assert!((v.identity_residual - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn zero_polynomial_with_zero_gram_is_ok() {
        let basis = monomial_basis(2, 1, 1);
        let (res, _, eig) = check_gram(&basis, &DMatrix::zeros(2, 2), &Polynomial::zero(2)).unwrap();
        assert_eq!(res, 0.0);
        assert_eq!(eig, 0.0);
    }

    #[test]
    fn no_constant_multiplier_vanishes_at_origin() {
        let mut prog = SosProgram::new(2);
        let s = prog.sos_var("s2", 2, true);
        assert_eq!(prog.vars[s.0].basis.min_degree(), Some(1));
        // x1^2 + x2^2 - s with s SOS and no constant
        let c = SosConstraint::new("c", poly(2, &[(&[2, 0], 1.0), (&[0, 2], 1.0)]))
            .with(s, Action::Mul(Polynomial::constant(2, -1.0)));
        prog.add(c);
        let sol = prog.solve(&SosOptions::default()).unwrap();
        let cert = sol.certificate.unwrap();
        assert_eq!(cert.value(s).coeff(&Monomial::one(2)), 0.0);
    }

    #[test]
    fn rows_cover_every_monomial() {
        let p = poly(2, &[(&[4, 0], 1.0), (&[0, 4], 1.0), (&[0, 0], 1.0)]);
        let prog = single(p.clone());
        let compiled = prog.compile().unwrap();
        let basis = &compiled.gram_bases[0];
        let mut want: Vec<Monomial> = p.terms().map(|(m, _)| m.clone()).collect();
        for a in basis.iter() {
            for b in basis.iter() {
                want.push(a.mul(b));
            }
        }
        want.sort();
        want.dedup();
        let got: Vec<Monomial> = compiled.row_monomials.iter().map(|(_, m)| m.clone()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn free_variable_lie_action() {
        // find V = a x^2 with -(dV/dx)(-x) - x^2 SOS and V - x^2 SOS: a >= 1
        let mut prog = SosProgram::new(1);
        let v = prog.free_var("V", monomial_basis(1, 2, 2));
        let f = vec![poly(1, &[(&[1], -1.0)])];
        prog.add(
            SosConstraint::new("decrease", poly(1, &[(&[2], -1.0)]))
                .with(v, Action::Lie { field: f, scale: -1.0 }),
        );
        prog.add(
            SosConstraint::new("pos", poly(1, &[(&[2], -1.0)]))
                .with(v, Action::Mul(Polynomial::constant(1, 1.0))),
        );
        prog.objective.push((v, Monomial::new(vec![2]), 1.0));
        let sol = prog.solve(&SosOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Feasible);
        let a = sol.certificate.unwrap().value(v).coeff(&Monomial::new(vec![2]));
        assert!((a - 1.0).abs() < 1e-5, "a = {a}");
    }
}
