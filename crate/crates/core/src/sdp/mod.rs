//! Standard-form semidefinite problems and a small dense solver.
//!
//! Variables are the upper triangles of the PSD blocks in `svec` order
//! (row-major over `p <= q`, off-diagonal entries scaled by `sqrt(2)` so that
//! Euclidean inner products equal matrix inner products), followed by the free
//! scalars. Feasibility problems are solved through a phase-I program that
//! maximizes the smallest eigenvalue shift `-t` with `Q_b = X_b - t I`.

mod ipm;

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use ipm::{IpmProblem, IpmStatus, Row};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdpError {
    #[error("inconsistent problem dimensions: {0}")]
    Dimensions(String),
    #[error("non-finite value in problem data")]
    NonFinite,
    #[error("matrix is not symmetric")]
    Asymmetric,
}

pub fn svec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Offset of entry `(p, q)` (`p <= q`) inside one block's `svec`.
pub fn svec_index(n: usize, p: usize, q: usize) -> usize {
    let (p, q) = if p <= q { (p, q) } else { (q, p) };
    // rows 0..p contribute n + (n-1) + ... + (n-p+1) entries
    p * n - p * (p.saturating_sub(1)) / 2 + (q - p)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Equality {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SdpProblem {
    pub blocks: Vec<usize>,
    pub free_vars: usize,
    pub equalities: Vec<Equality>,
    /// Sparse linear objective; empty means pure feasibility.
    pub objective: Vec<(usize, f64)>,
}

impl SdpProblem {
    pub fn new(blocks: Vec<usize>, free_vars: usize) -> Self {
        SdpProblem {
            blocks,
            free_vars,
            ..Default::default()
        }
    }

    pub fn block_offset(&self, block: usize) -> usize {
        self.blocks[..block].iter().map(|&n| svec_len(n)).sum()
    }

    /// Global variable index of entry `(p, q)` of `block`.
    pub fn var_index(&self, block: usize, p: usize, q: usize) -> usize {
        self.block_offset(block) + svec_index(self.blocks[block], p, q)
    }

    pub fn free_index(&self, k: usize) -> usize {
        self.block_offset(self.blocks.len()) + k
    }

    pub fn n_vars(&self) -> usize {
        self.block_offset(self.blocks.len()) + self.free_vars
    }

    /// Sparse text dump, one `row var value` line per coefficient and one
    /// `row rhs value` line per equality.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# blocks {:?} free {}", self.blocks, self.free_vars);
        for (i, eq) in self.equalities.iter().enumerate() {
            for &(v, c) in &eq.terms {
                let _ = writeln!(s, "{i} {v} {c:.17e}");
            }
            let _ = writeln!(s, "{i} rhs {:.17e}", eq.rhs);
        }
        for &(v, c) in &self.objective {
            let _ = writeln!(s, "obj {v} {c:.17e}");
        }
        s
    }

    fn validate(&self) -> Result<(), SdpError> {
        let nv = self.n_vars();
        for (i, eq) in self.equalities.iter().enumerate() {
            if !eq.rhs.is_finite() {
                return Err(SdpError::NonFinite);
            }
            for &(v, c) in &eq.terms {
                if v >= nv {
                    return Err(SdpError::Dimensions(format!(
                        "equality {i} references variable {v} of {nv}"
                    )));
                }
                if !c.is_finite() {
                    return Err(SdpError::NonFinite);
                }
            }
        }
        for &(v, c) in &self.objective {
            if v >= nv {
                return Err(SdpError::Dimensions(format!(
                    "objective references variable {v} of {nv}"
                )));
            }
            if !c.is_finite() {
                return Err(SdpError::NonFinite);
            }
        }
        Ok(())
    }

    /// Maps a global variable index to `Block(b, p, q)` or `Free(k)`.
    fn locate(&self, v: usize) -> VarLoc {
        let mut off = 0;
        for (b, &n) in self.blocks.iter().enumerate() {
            let len = svec_len(n);
            if v < off + len {
                let mut k = v - off;
                for p in 0..n {
                    let row = n - p;
                    if k < row {
                        return VarLoc::Block(b, p, p + k);
                    }
                    k -= row;
                }
            }
            off += len;
        }
        VarLoc::Free(v - off)
    }
}

enum VarLoc {
    Block(usize, usize, usize),
    Free(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SdpStatus {
    Feasible,
    Infeasible,
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// `max |b - A v| / max(1, max |b|)`.
    pub primal_eq: f64,
    pub min_block_eigenvalue: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub blocks: Vec<DMatrix<f64>>,
    pub free_values: Vec<f64>,
    pub objective_value: f64,
    pub residuals: Residuals,
    /// Phase-I optimum estimate `t`: feasible iff `t < psd_tol`.
    pub phase1_t: f64,
    /// Objective of the final interior-point iterate, which may be slightly
    /// infeasible. Equals `objective_value` when that iterate validated; NaN
    /// for pure feasibility problems.
    pub objective_estimate: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdpOptions {
    pub eq_tol: f64,
    pub psd_tol: f64,
    pub max_iter: usize,
    /// Stop phase I at the first strictly interior witness. When false the
    /// phase-I problem is solved to optimality, yielding a deeper witness.
    pub early_exit: bool,
}

impl Default for SdpOptions {
    fn default() -> Self {
        SdpOptions {
            eq_tol: 1e-7,
            psd_tol: 1e-8,
            max_iter: 200,
            early_exit: true,
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64, SdpError> {
    if !m.is_square() {
        return Err(SdpError::Asymmetric);
    }
    if m.nrows() == 0 {
        return Ok(f64::INFINITY);
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return Err(SdpError::Asymmetric);
    }
    if m.nrows() == 1 {
        return Ok(m[(0, 0)]);
    }
    let ev = SymmetricEigen::new(m.clone()).eigenvalues;
    Ok(ev.iter().cloned().fold(f64::INFINITY, f64::min))
}

/// Least-norm corrections onto `{v : E v = b}` in the `svec` variable space.
struct AffineProjector {
    rows: Vec<Vec<(usize, f64)>>,
    b: Vec<f64>,
    n_vars: usize,
    eig_vecs: DMatrix<f64>,
    inv_vals: DVector<f64>,
}

impl AffineProjector {
    fn new(prob: &SdpProblem) -> Self {
        let m = prob.equalities.len();
        let n_vars = prob.n_vars();
        let rows: Vec<Vec<(usize, f64)>> = prob
            .equalities
            .iter()
            .map(|e| {
                let mut dense: std::collections::BTreeMap<usize, f64> = Default::default();
                for &(v, c) in &e.terms {
                    *dense.entry(v).or_insert(0.0) += c;
                }
                dense.into_iter().filter(|(_, c)| *c != 0.0).collect()
            })
            .collect();
        let mut g = DMatrix::zeros(m, m);
        let mut col = vec![Vec::<(usize, f64)>::new(); n_vars];
        for (i, r) in rows.iter().enumerate() {
            for &(v, c) in r {
                col[v].push((i, c));
            }
        }
        for entries in &col {
            for &(i, a) in entries {
                for &(j, c) in entries {
                    g[(i, j)] += a * c;
                }
            }
        }
        let eig = SymmetricEigen::new(g);
        let smax = eig.eigenvalues.amax();
        let cut = smax * 1e-13;
        let inv_vals = eig
            .eigenvalues
            .map(|s| if s > cut && s > 0.0 { 1.0 / s } else { 0.0 });
        AffineProjector {
            rows,
            b: prob.equalities.iter().map(|e| e.rhs).collect(),
            n_vars,
            eig_vecs: eig.eigenvectors,
            inv_vals,
        }
    }

    fn residual(&self, v: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.b)
            .map(|(r, b)| b - r.iter().map(|&(k, c)| c * v[k]).sum::<f64>())
            .collect()
    }

    fn scaled_max(&self, r: &[f64]) -> f64 {
        let bmax = self.b.iter().fold(1.0_f64, |a, b| a.max(b.abs()));
        r.iter().fold(0.0_f64, |a, x| a.max(x.abs())) / bmax
    }

    /// Returns `v + E^T (E E^T)^+ (b - E v)`.
    fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        for _ in 0..2 {
            let r = DVector::from_vec(self.residual(&out));
            let w = self.eig_vecs.transpose() * r;
            let w = w.component_mul(&self.inv_vals);
            let lam = &self.eig_vecs * w;
            for (i, row) in self.rows.iter().enumerate() {
                for &(k, c) in row {
                    out[k] += c * lam[i];
                }
            }
        }
        debug_assert_eq!(out.len(), self.n_vars);
        out
    }
}

fn svec_of(blocks: &[DMatrix<f64>], free: &[f64]) -> Vec<f64> {
    let s2 = std::f64::consts::SQRT_2;
    let mut v = Vec::new();
    for m in blocks {
        let n = m.nrows();
        for p in 0..n {
            v.push(m[(p, p)]);
            for q in p + 1..n {
                v.push(s2 * 0.5 * (m[(p, q)] + m[(q, p)]));
            }
        }
    }
    v.extend_from_slice(free);
    v
}

fn unsvec(prob: &SdpProblem, v: &[f64]) -> (Vec<DMatrix<f64>>, Vec<f64>) {
    let s2 = std::f64::consts::SQRT_2;
    let mut k = 0;
    let mut blocks = Vec::with_capacity(prob.blocks.len());
    for &n in &prob.blocks {
        let mut m = DMatrix::zeros(n, n);
        for p in 0..n {
            m[(p, p)] = v[k];
            k += 1;
            for q in p + 1..n {
                m[(p, q)] = v[k] / s2;
                m[(q, p)] = v[k] / s2;
                k += 1;
            }
        }
        blocks.push(m);
    }
    (blocks, v[k..].to_vec())
}

struct Witness {
    blocks: Vec<DMatrix<f64>>,
    free: Vec<f64>,
    residuals: Residuals,
}

impl Witness {
    fn from_iterate(
        prob: &SdpProblem,
        proj: &AffineProjector,
        blocks: &[DMatrix<f64>],
        free: &[f64],
    ) -> Witness {
        let v = proj.project(&svec_of(blocks, free));
        let primal_eq = proj.scaled_max(&proj.residual(&v));
        let (blocks, free) = unsvec(prob, &v);
        let min_eig = blocks
            .iter()
            .map(|b| min_eigenvalue(b).unwrap_or(f64::NEG_INFINITY))
            .fold(f64::INFINITY, f64::min);
        Witness {
            blocks,
            free,
            residuals: Residuals {
                primal_eq,
                min_block_eigenvalue: min_eig,
            },
        }
    }

    fn passes(&self, opts: &SdpOptions) -> bool {
        self.residuals.primal_eq <= opts.eq_tol
            && self.residuals.min_block_eigenvalue >= -opts.psd_tol
    }
}

/// Converts to symmetric-matrix rows with unit max-abs row scaling.
fn to_ipm(prob: &SdpProblem) -> (Vec<Row>, Vec<f64>) {
    let inv_s2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut rows = Vec::with_capacity(prob.equalities.len());
    let mut rhs = Vec::with_capacity(prob.equalities.len());
    for eq in &prob.equalities {
        let scale = eq
            .terms
            .iter()
            .fold(0.0_f64, |a, t| a.max(t.1.abs()))
            .max(1e-300);
        let mut per_block: std::collections::BTreeMap<usize, Vec<(usize, usize, f64)>> =
            Default::default();
        let mut free = Vec::new();
        for &(v, c) in &eq.terms {
            let c = c / scale;
            match prob.locate(v) {
                VarLoc::Block(b, p, q) => {
                    let e = per_block.entry(b).or_default();
                    if p == q {
                        e.push((p, p, c));
                    } else {
                        e.push((p, q, c * inv_s2));
                        e.push((q, p, c * inv_s2));
                    }
                }
                VarLoc::Free(k) => free.push((k, c)),
            }
        }
        rows.push(Row {
            blocks: per_block.into_iter().collect(),
            free,
        });
        rhs.push(eq.rhs / scale);
    }
    (rows, rhs)
}

fn empty_solution(prob: &SdpProblem, status: SdpStatus) -> SdpSolution {
    SdpSolution {
        status,
        blocks: prob.blocks.iter().map(|&n| DMatrix::zeros(n, n)).collect(),
        free_values: vec![0.0; prob.free_vars],
        objective_value: 0.0,
        residuals: Residuals {
            primal_eq: 0.0,
            min_block_eigenvalue: 0.0,
        },
        phase1_t: 0.0,
        objective_estimate: f64::NAN,
        iterations: 0,
    }
}

/// Solves `prob`. Deterministic for identical input and options.
pub fn solve(prob: &SdpProblem, opts: &SdpOptions) -> Result<SdpSolution, SdpError> {
    prob.validate()?;
    if prob.equalities.is_empty() && prob.objective.is_empty() {
        return Ok(empty_solution(prob, SdpStatus::Feasible));
    }
    let proj = AffineProjector::new(prob);

    // Linear consistency of the equalities alone.
    let v0 = proj.project(&vec![0.0; prob.n_vars()]);
    let lin_res = proj.scaled_max(&proj.residual(&v0));
    if lin_res > opts.eq_tol {
        let mut sol = empty_solution(prob, SdpStatus::Infeasible);
        sol.residuals.primal_eq = lin_res;
        sol.phase1_t = f64::INFINITY;
        return Ok(sol);
    }

    let phase1 = phase_one(prob, &proj, opts);
    if phase1.status != SdpStatus::Feasible || prob.objective.is_empty() {
        return Ok(phase1);
    }
    Ok(match optimize(prob, &proj, opts) {
        Ok(sol) => sol,
        Err(estimate) => SdpSolution {
            objective_estimate: estimate,
            ..phase1
        },
    })
}

fn phase_one(prob: &SdpProblem, proj: &AffineProjector, opts: &SdpOptions) -> SdpSolution {
    let nb = prob.blocks.len();
    let (mut rows, mut b) = to_ipm(prob);
    for (row, bi) in rows.iter_mut().zip(b.iter_mut()) {
        let tau: f64 = row
            .blocks
            .iter()
            .flat_map(|(_, e)| e.iter().filter(|t| t.0 == t.1).map(|t| t.2))
            .sum();
        if tau != 0.0 {
            row.blocks.push((nb, vec![(0, 0, -tau)]));
        }
        *bi -= tau;
    }
    let mut blocks = prob.blocks.clone();
    blocks.push(1);
    let mut c_blocks: Vec<DMatrix<f64>> = prob.blocks.iter().map(|&n| DMatrix::zeros(n, n)).collect();
    c_blocks.push(DMatrix::from_element(1, 1, 1.0));
    let ipm_prob = IpmProblem {
        blocks,
        n_free: prob.free_vars,
        rows,
        b,
        c_blocks,
        c_free: vec![0.0; prob.free_vars],
    };

    let shifted = |x: &[DMatrix<f64>]| -> (Vec<DMatrix<f64>>, f64) {
        let t = x[nb][(0, 0)] - 1.0;
        let q = x[..nb]
            .iter()
            .map(|xb| {
                let n = xb.nrows();
                xb - DMatrix::identity(n, n) * t
            })
            .collect();
        (q, t)
    };

    // best strictly interior witness seen so far
    let mut found: Option<(Witness, f64)> = None;
    let mut early = |x: &[DMatrix<f64>], y: &[f64]| -> bool {
        let (q, t) = shifted(x);
        if t >= -1e-6 || found.as_ref().is_some_and(|f| t >= f.1) {
            return false;
        }
        let w = Witness::from_iterate(prob, proj, &q, y);
        if w.passes(opts) && w.residuals.min_block_eigenvalue > 0.0 {
            found = Some((w, t));
            return opts.early_exit;
        }
        false
    };
    let res = ipm::solve(&ipm_prob, opts.max_iter, &mut early);

    let (q, t) = shifted(&res.x);
    let w = Witness::from_iterate(prob, proj, &q, &res.y);
    let final_ok = t < opts.psd_tol && w.passes(opts);
    if let Some((fw, ft)) = found.filter(|f| !final_ok || f.1 < t) {
        return SdpSolution {
            status: SdpStatus::Feasible,
            blocks: fw.blocks,
            free_values: fw.free,
            objective_value: 0.0,
            residuals: fw.residuals,
            phase1_t: ft,
            objective_estimate: f64::NAN,
            iterations: res.iterations,
        };
    }
    let status = if final_ok {
        SdpStatus::Feasible
    } else {
        let lower = res.dobj - 1.0;
        match res.status {
            IpmStatus::Converged if t > 10.0 * opts.psd_tol => SdpStatus::Infeasible,
            _ if res.dinf < 1e-7 && lower > 10.0 * opts.psd_tol => SdpStatus::Infeasible,
            _ => SdpStatus::Unknown,
        }
    };
    SdpSolution {
        status,
        blocks: w.blocks,
        free_values: w.free,
        objective_value: 0.0,
        residuals: w.residuals,
        phase1_t: t,
        objective_estimate: f64::NAN,
        iterations: res.iterations,
    }
}

/// `Err` carries the objective of the last iterate when no iterate could be
/// validated.
fn optimize(prob: &SdpProblem, proj: &AffineProjector, opts: &SdpOptions) -> Result<SdpSolution, f64> {
    let (rows, b) = to_ipm(prob);
    let inv_s2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut c_blocks: Vec<DMatrix<f64>> =
        prob.blocks.iter().map(|&n| DMatrix::zeros(n, n)).collect();
    let mut c_free = vec![0.0; prob.free_vars];
    for &(v, c) in &prob.objective {
        match prob.locate(v) {
            VarLoc::Block(bk, p, q) if p == q => c_blocks[bk][(p, p)] += c,
            VarLoc::Block(bk, p, q) => {
                c_blocks[bk][(p, q)] += c * inv_s2;
                c_blocks[bk][(q, p)] += c * inv_s2;
            }
            VarLoc::Free(k) => c_free[k] += c,
        }
    }
    let ipm_prob = IpmProblem {
        blocks: prob.blocks.clone(),
        n_free: prob.free_vars,
        rows,
        b,
        c_blocks,
        c_free,
    };
    let objective = |v: &[f64]| prob.objective.iter().map(|&(k, c)| c * v[k]).sum::<f64>();
    // Degenerate problems can stall short of the optimum; keep the best
    // iterate that survives projection onto the equalities.
    let mut best: Option<(Witness, f64)> = None;
    let mut track = |x: &[DMatrix<f64>], y: &[f64]| {
        let raw = objective(&svec_of(x, y));
        if best.as_ref().is_some_and(|b| raw >= b.1) {
            return false;
        }
        let w = Witness::from_iterate(prob, proj, x, y);
        if w.passes(opts) {
            let obj = objective(&svec_of(&w.blocks, &w.free));
            if best.as_ref().is_none_or(|b| obj < b.1) {
                best = Some((w, obj));
            }
        }
        false
    };
    let res = ipm::solve(&ipm_prob, opts.max_iter, &mut track);
    let last = Witness::from_iterate(prob, proj, &res.x, &res.y);
    let last_obj = objective(&svec_of(&last.blocks, &last.free));
    let (w, obj) = match best {
        _ if res.status == IpmStatus::Converged && last.passes(opts) => (last, last_obj),
        Some(b) => {
            log::debug!("objective solve ended {:?}; using best validated iterate", res.status);
            b
        }
        None => {
            log::debug!("objective solve ended {:?} after {} iterations", res.status, res.iterations);
            return Err(objective(&svec_of(&res.x, &res.y)));
        }
    };
    Ok(SdpSolution {
        status: SdpStatus::Feasible,
        blocks: w.blocks,
        free_values: w.free,
        objective_value: obj,
        residuals: w.residuals,
        phase1_t: f64::NAN,
        objective_estimate: obj,
        iterations: res.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pin_block(prob: &mut SdpProblem, block: usize, q: &DMatrix<f64>) {
        let n = q.nrows();
        let s2 = std::f64::consts::SQRT_2;
        for p in 0..n {
            for r in p..n {
                let v = prob.var_index(block, p, r);
                let rhs = if p == r { q[(p, p)] } else { s2 * q[(p, r)] };
                prob.equalities.push(Equality {
                    terms: vec![(v, 1.0)],
                    rhs,
                });
            }
        }
    }

    #[test]
    fn svec_indexing() {
        assert_eq!(svec_index(3, 0, 0), 0);
        assert_eq!(svec_index(3, 0, 2), 2);
        assert_eq!(svec_index(3, 1, 1), 3);
        assert_eq!(svec_index(3, 2, 1), 4);
        assert_eq!(svec_index(3, 2, 2), 5);
        let p = SdpProblem::new(vec![2, 3], 2);
        assert_eq!(p.var_index(1, 0, 0), 3);
        assert_eq!(p.free_index(1), 10);
        assert_eq!(p.n_vars(), 11);
    }

    #[test]
    fn min_eigenvalue_examples() {
        let d = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        assert!((min_eigenvalue(&d).unwrap() - 1.0).abs() < 1e-14);
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0]);
        // characteristic polynomial l^2 - 3l + 1
        let want = (3.0 - 5.0_f64.sqrt()) / 2.0;
        assert!((min_eigenvalue(&m).unwrap() - want).abs() < 1e-14);
        let s = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!((min_eigenvalue(&s).unwrap() + 1.0).abs() < 1e-14);
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(min_eigenvalue(&a), Err(SdpError::Asymmetric));
    }

    #[test]
    fn pinned_block_is_feasible() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0]);
        let mut prob = SdpProblem::new(vec![2], 0);
        pin_block(&mut prob, 0, &q);
        let sol = solve(&prob, &SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Feasible);
        let want = (3.0 - 5.0_f64.sqrt()) / 2.0;
        assert!((sol.residuals.min_block_eigenvalue - want).abs() < 1e-9);
        assert!((&sol.blocks[0] - &q).amax() < 1e-9);
    }

    #[test]
    fn negative_scalar_is_infeasible() {
        let mut prob = SdpProblem::new(vec![1], 0);
        prob.equalities.push(Equality {
            terms: vec![(0, 1.0)],
            rhs: -1.0,
        });
        let sol = solve(&prob, &SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Infeasible);
        assert!((sol.phase1_t - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_problem_is_feasible_at_zero() {
        let prob = SdpProblem::new(vec![3], 1);
        let sol = solve(&prob, &SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Feasible);
        assert_eq!(sol.blocks[0], DMatrix::zeros(3, 3));
    }

    #[test]
    fn rejects_bad_input() {
        let mut prob = SdpProblem::new(vec![1], 0);
        prob.equalities.push(Equality {
            terms: vec![(5, 1.0)],
            rhs: 0.0,
        });
        assert!(matches!(
            solve(&prob, &SdpOptions::default()),
            Err(SdpError::Dimensions(_))
        ));
        prob.equalities[0] = Equality {
            terms: vec![(0, f64::NAN)],
            rhs: 0.0,
        };
        assert_eq!(
            solve(&prob, &SdpOptions::default()),
            Err(SdpError::NonFinite)
        );
    }

    #[test]
    fn inconsistent_equalities_are_infeasible() {
        let mut prob = SdpProblem::new(vec![1], 0);
        prob.equalities.push(Equality {
            terms: vec![(0, 1.0)],
            rhs: 1.0,
        });
        prob.equalities.push(Equality {
            terms: vec![(0, 1.0)],
            rhs: 2.0,
        });
        let sol = solve(&prob, &SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Infeasible);
    }

    #[test]
    fn free_variables_and_objective() {
        // X 2x2 with X00 + y = 3, X11 - y = 1, X01 = 0; minimize X00 + X11 + 0*y.
        let mut prob = SdpProblem::new(vec![2], 1);
        let y = prob.free_index(0);
        prob.equalities.push(Equality {
            terms: vec![(prob.var_index(0, 0, 0), 1.0), (y, 1.0)],
            rhs: 3.0,
        });
        prob.equalities.push(Equality {
            terms: vec![(prob.var_index(0, 1, 1), 1.0), (y, -1.0)],
            rhs: 1.0,
        });
        prob.equalities.push(Equality {
            terms: vec![(prob.var_index(0, 0, 1), 1.0)],
            rhs: 0.0,
        });
        // minimize X00: optimum y = 3, X00 = 0, X11 = 4
        prob.objective = vec![(prob.var_index(0, 0, 0), 1.0)];
        let sol = solve(&prob, &SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Feasible);
        assert!(sol.objective_value.abs() < 1e-6, "{}", sol.objective_value);
        assert!((sol.free_values[0] - 3.0).abs() < 1e-5);
    }

    #[test]
    fn random_feasible_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let sizes = vec![rng.gen_range(1..5), rng.gen_range(2..6)];
            let nfree = rng.gen_range(0..3);
            let mut prob = SdpProblem::new(sizes.clone(), nfree);
            // witness: random PSD blocks (possibly singular) and free values
            let blocks: Vec<DMatrix<f64>> = sizes
                .iter()
                .map(|&n| {
                    let r = rng.gen_range(1..=n);
                    let g = DMatrix::from_fn(n, r, |_, _| rng.gen_range(-1.0..1.0));
                    &g * g.transpose()
                })
                .collect();
            let free: Vec<f64> = (0..nfree).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let v = svec_of(&blocks, &free);
            let nv = prob.n_vars();
            let m = rng.gen_range(1..nv);
            for _ in 0..m {
                let terms: Vec<(usize, f64)> = (0..3)
                    .map(|_| (rng.gen_range(0..nv), rng.gen_range(-1.0..1.0)))
                    .collect();
                let rhs = terms.iter().map(|&(k, c)| c * v[k]).sum();
                prob.equalities.push(Equality { terms, rhs });
            }
            let opts = SdpOptions::default();
            let sol = solve(&prob, &opts).unwrap();
            assert_eq!(sol.status, SdpStatus::Feasible, "trial {trial}");
            assert!(sol.residuals.primal_eq <= opts.eq_tol);
            assert!(sol.residuals.min_block_eigenvalue >= -opts.psd_tol);
            let again = solve(&prob, &opts).unwrap();
            assert_eq!(again.status, sol.status);
            assert_eq!(again.phase1_t.to_bits(), sol.phase1_t.to_bits());
        }
    }

    #[test]
    fn dump_lists_every_coefficient() {
        let mut prob = SdpProblem::new(vec![1], 0);
        prob.equalities.push(Equality {
            terms: vec![(0, 1.0)],
            rhs: 2.0,
        });
        let d = prob.dump();
        assert!(d.contains("0 0 1.00000000000000000e0"));
        assert!(d.contains("0 rhs 2.00000000000000000e0"));
    }
}
