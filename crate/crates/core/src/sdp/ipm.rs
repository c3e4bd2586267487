//! Infeasible-start primal-dual path-following method (HKM direction with a
//! Mehrotra corrector) for
//!
//! ```text
//! min  <C, X> + c_f' y   s.t.  A(X) + F y = b,  X = blkdiag(X_1..X_k) >= 0
//! ```
//!
//! All linear algebra is dense. The Schur complement is solved together with
//! the free-variable columns as one augmented system.

use nalgebra::{DMatrix, DVector};

/// One equality row in symmetric-matrix form: `sum a * X_b[p, q]` over both
/// triangles, plus free-variable terms.
#[derive(Clone, Debug, Default)]
pub(crate) struct Row {
    pub blocks: Vec<(usize, Vec<(usize, usize, f64)>)>,
    pub free: Vec<(usize, f64)>,
}

#[derive(Clone, Debug)]
pub(crate) struct IpmProblem {
    pub blocks: Vec<usize>,
    pub n_free: usize,
    pub rows: Vec<Row>,
    pub b: Vec<f64>,
    pub c_blocks: Vec<DMatrix<f64>>,
    pub c_free: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum IpmStatus {
    Converged,
    EarlyExit,
    MaxIter,
    Stalled,
}

#[derive(Clone, Debug)]
pub(crate) struct IpmResult {
    pub status: IpmStatus,
    pub x: Vec<DMatrix<f64>>,
    pub y: Vec<f64>,
    pub dobj: f64,
    pub dinf: f64,
    pub iterations: usize,
}

const TOL: f64 = 1e-9;

impl IpmProblem {
    fn m(&self) -> usize {
        self.rows.len()
    }

    fn apply(&self, x: &[DMatrix<f64>], y: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| {
                let mut s = 0.0;
                for (b, ents) in &r.blocks {
                    for &(p, q, a) in ents {
                        s += a * x[*b][(p, q)];
                    }
                }
                for &(k, f) in &r.free {
                    s += f * y[k];
                }
                s
            })
            .collect()
    }

    fn adjoint(&self, lam: &[f64]) -> Vec<DMatrix<f64>> {
        let mut out: Vec<DMatrix<f64>> =
            self.blocks.iter().map(|&n| DMatrix::zeros(n, n)).collect();
        for (r, &l) in self.rows.iter().zip(lam) {
            if l == 0.0 {
                continue;
            }
            for (b, ents) in &r.blocks {
                for &(p, q, a) in ents {
                    out[*b][(p, q)] += a * l;
                }
            }
        }
        out
    }

    fn adjoint_free(&self, lam: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_free];
        for (r, &l) in self.rows.iter().zip(lam) {
            for &(k, f) in &r.free {
                out[k] += f * l;
            }
        }
        out
    }

    /// `M_ij = sum_b tr(A_ib X_b A_jb Zinv_b)`.
    fn schur(&self, x: &[DMatrix<f64>], zinv: &[DMatrix<f64>]) -> DMatrix<f64> {
        let m = self.m();
        let mut mat = DMatrix::zeros(m, m);
        // rows touching each block
        let mut by_block: Vec<Vec<(usize, &Vec<(usize, usize, f64)>)>> =
            vec![Vec::new(); self.blocks.len()];
        for (i, r) in self.rows.iter().enumerate() {
            for (b, ents) in &r.blocks {
                by_block[*b].push((i, ents));
            }
        }
        for (b, rows) in by_block.iter().enumerate() {
            let n = self.blocks[b];
            let xb = &x[b];
            let zb = &zinv[b];
            let mut g = DMatrix::zeros(n, n);
            for &(j, ents_j) in rows {
                g.fill(0.0);
                // G = X A_j Zinv = sum a * X[:, r] Zinv[s, :]
                for &(r, s, a) in ents_j.iter() {
                    for c in 0..n {
                        let zsc = a * zb[(s, c)];
                        if zsc == 0.0 {
                            continue;
                        }
                        for rr in 0..n {
                            g[(rr, c)] += xb[(rr, r)] * zsc;
                        }
                    }
                }
                for &(i, ents_i) in rows {
                    if i < j {
                        continue;
                    }
                    // tr(A_i G) = sum A_i[p, q] G[q, p]
                    let v: f64 = ents_i.iter().map(|&(p, q, a)| a * g[(q, p)]).sum();
                    mat[(i, j)] += v;
                    if i != j {
                        mat[(j, i)] += v;
                    }
                }
            }
        }
        mat
    }
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn inner(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Largest `alpha` keeping `x + alpha * dx` positive semidefinite (capped at 1e6).
fn max_step(x: &[DMatrix<f64>], dx: &[DMatrix<f64>]) -> Option<f64> {
    let mut alpha = 1e6_f64;
    for (xb, db) in x.iter().zip(dx) {
        let n = xb.nrows();
        if n == 1 {
            if db[(0, 0)] < 0.0 {
                alpha = alpha.min(-xb[(0, 0)] / db[(0, 0)]);
            }
            continue;
        }
        let l = xb.clone().cholesky()?.l();
        let linv_d = l.solve_lower_triangular(db)?;
        let s = l.solve_lower_triangular(&linv_d.transpose())?;
        let ev = nalgebra::SymmetricEigen::new(sym(&s)).eigenvalues;
        let lmin = ev.iter().cloned().fold(f64::INFINITY, f64::min);
        if lmin < 0.0 {
            alpha = alpha.min(-1.0 / lmin);
        }
    }
    Some(alpha)
}

/// Augmented system `[[M, F], [F', 0]]`, equilibrated symmetrically and
/// solved by LU with a few rounds of iterative refinement.
struct Kkt {
    k: DMatrix<f64>,
    d: DVector<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    m: usize,
}

impl Kkt {
    fn new(mmat: DMatrix<f64>, prob: &IpmProblem) -> Option<Kkt> {
        let m = prob.m();
        let nf = prob.n_free;
        let mut k = DMatrix::zeros(m + nf, m + nf);
        k.view_mut((0, 0), (m, m)).copy_from(&mmat);
        for (i, r) in prob.rows.iter().enumerate() {
            for &(j, f) in &r.free {
                k[(i, m + j)] += f;
                k[(m + j, i)] += f;
            }
        }
        let mut d = DVector::from_element(m + nf, 1.0);
        for i in 0..m {
            let mii = mmat[(i, i)];
            if mii > 0.0 && mii.is_finite() {
                d[i] = 1.0 / mii.sqrt();
            }
        }
        for j in 0..nf {
            let big = (0..m).map(|i| (d[i] * k[(i, m + j)]).abs()).fold(0.0, f64::max);
            if big > 0.0 {
                d[m + j] = 1.0 / big;
            }
        }
        let mut ks = k.clone();
        for c in 0..m + nf {
            for r in 0..m + nf {
                ks[(r, c)] *= d[r] * d[c];
            }
        }
        for i in 0..m {
            ks[(i, i)] += 1e-14;
        }
        for j in 0..nf {
            ks[(m + j, m + j)] -= 1e-14;
        }
        let lu = ks.lu();
        if !lu.is_invertible() {
            return None;
        }
        Some(Kkt { k, d, lu, m })
    }

    fn raw_solve(&self, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        let scaled = rhs.component_mul(&self.d);
        let sol = self.lu.solve(&scaled)?;
        Some(sol.component_mul(&self.d))
    }

    fn solve(&self, h: &[f64], rf: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let mut rhs = DVector::zeros(self.m + rf.len());
        rhs.as_mut_slice()[..self.m].copy_from_slice(h);
        rhs.as_mut_slice()[self.m..].copy_from_slice(rf);
        let mut sol = self.raw_solve(&rhs)?;
        let mut res_norm = (&rhs - &self.k * &sol).norm();
        for _ in 0..3 {
            let r = &rhs - &self.k * &sol;
            let cand = &sol + self.raw_solve(&r)?;
            let cn = (&rhs - &self.k * &cand).norm();
            if !(cn < res_norm) {
                break;
            }
            sol = cand;
            res_norm = cn;
        }
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let s = sol.as_slice();
        Some((s[..self.m].to_vec(), s[self.m..].to_vec()))
    }
}

/// Runs the method; `early_exit` is consulted with the current primal iterate
/// after every step and may stop the iteration by returning `true`.
pub(crate) fn solve(
    prob: &IpmProblem,
    max_iter: usize,
    early_exit: &mut dyn FnMut(&[DMatrix<f64>], &[f64]) -> bool,
) -> IpmResult {
    let nb = prob.blocks.len();
    let m = prob.m();
    let big_n: usize = prob.blocks.iter().sum();
    let bnorm = norm(&prob.b);
    let cnorm = (prob.c_blocks.iter().map(|c| c.norm_squared()).sum::<f64>()
        + dot(&prob.c_free, &prob.c_free))
    .sqrt();

    let mut xi = 10.0_f64.max((big_n as f64).sqrt());
    let mut eta = 10.0_f64.max((big_n as f64).sqrt()).max(cnorm);
    for (r, &bi) in prob.rows.iter().zip(&prob.b) {
        let an: f64 = r
            .blocks
            .iter()
            .flat_map(|(_, e)| e.iter().map(|t| t.2 * t.2))
            .sum::<f64>()
            .sqrt();
        xi = xi.max((1.0 + bi.abs()) / (1.0 + an));
        eta = eta.max(an);
    }

    let mut x: Vec<DMatrix<f64>> = prob
        .blocks
        .iter()
        .map(|&n| DMatrix::identity(n, n) * xi)
        .collect();
    let mut z: Vec<DMatrix<f64>> = prob
        .blocks
        .iter()
        .map(|&n| DMatrix::identity(n, n) * eta)
        .collect();
    let mut y = vec![0.0; prob.n_free];
    let mut lam = vec![0.0; m];

    let mut stall = 0;
    let mut best_merit = f64::INFINITY;
    let mut since_best = 0;
    let mut last_dinf = f64::INFINITY;
    let mut status = IpmStatus::MaxIter;
    let mut iters = 0;
    for it in 0..max_iter {
        iters = it;
        let ax = prob.apply(&x, &y);
        let rp: Vec<f64> = prob.b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let aty = prob.adjoint(&lam);
        let rd: Vec<DMatrix<f64>> = (0..nb)
            .map(|b| &prob.c_blocks[b] - &aty[b] - &z[b])
            .collect();
        let ftl = prob.adjoint_free(&lam);
        let rf: Vec<f64> = prob.c_free.iter().zip(&ftl).map(|(c, f)| c - f).collect();
        let xz = inner(&x, &z);
        let mu = xz / big_n as f64;
        let pobj = inner(&prob.c_blocks, &x) + dot(&prob.c_free, &y);
        let dobj = dot(&prob.b, &lam);

        let pinf = norm(&rp) / (1.0 + bnorm);
        let dinf = (rd.iter().map(|r| r.norm_squared()).sum::<f64>() + dot(&rf, &rf)).sqrt()
            / (1.0 + cnorm);
        last_dinf = dinf;
        let gap = xz.abs().max((pobj - dobj).abs()) / (1.0 + pobj.abs() + dobj.abs());
        log::trace!("ipm {it}: pobj={pobj:.6e} dobj={dobj:.6e} pinf={pinf:.2e} dinf={dinf:.2e} gap={gap:.2e} mu={mu:.2e}");
        if pinf < TOL && dinf < TOL && gap < TOL {
            status = IpmStatus::Converged;
            break;
        }
        let merit = pinf.max(dinf).max(gap);
        if merit < 0.9 * best_merit {
            best_merit = merit;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= 8 {
                status = IpmStatus::Stalled;
                break;
            }
        }

        let mut zinv = Vec::with_capacity(nb);
        let mut ok = true;
        for zb in &z {
            match zb.clone().cholesky() {
                Some(ch) => zinv.push(sym(&ch.inverse())),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            status = IpmStatus::Stalled;
            break;
        }
        let kkt = match Kkt::new(prob.schur(&x, &zinv), prob) {
            Some(k) => k,
            None => {
                status = IpmStatus::Stalled;
                break;
            }
        };

        // Direction for a given complementarity right-hand side term
        // `T = Rc Zinv - X Rd Zinv`.
        let direction = |t: &[DMatrix<f64>]| -> Option<(Vec<DMatrix<f64>>, Vec<f64>, Vec<f64>, Vec<DMatrix<f64>>)> {
            let at = prob.apply(t, &vec![0.0; prob.n_free]);
            let h: Vec<f64> = rp.iter().zip(&at).map(|(r, a)| r - a).collect();
            let (dl, dy) = kkt.solve(&h, &rf)?;
            let adl = prob.adjoint(&dl);
            let dz: Vec<DMatrix<f64>> = (0..nb).map(|b| &rd[b] - &adl[b]).collect();
            let dx: Vec<DMatrix<f64>> = (0..nb)
                .map(|b| sym(&(&t[b] + &x[b] * &adl[b] * &zinv[b])))
                .collect();
            Some((dx, dy, dl, dz))
        };

        let xrdz: Vec<DMatrix<f64>> = (0..nb).map(|b| &x[b] * &rd[b] * &zinv[b]).collect();
        let t_pred: Vec<DMatrix<f64>> = (0..nb).map(|b| -&x[b] - &xrdz[b]).collect();
        let Some((dxp, _dyp, _dlp, dzp)) = direction(&t_pred) else {
            status = IpmStatus::Stalled;
            break;
        };
        let (Some(ap), Some(ad)) = (max_step(&x, &dxp), max_step(&z, &dzp)) else {
            status = IpmStatus::Stalled;
            break;
        };
        let ap = ap.min(1.0);
        let ad = ad.min(1.0);
        let xa: Vec<DMatrix<f64>> = (0..nb).map(|b| &x[b] + &dxp[b] * ap).collect();
        let za: Vec<DMatrix<f64>> = (0..nb).map(|b| &z[b] + &dzp[b] * ad).collect();
        let mu_aff = inner(&xa, &za) / big_n as f64;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        let t_corr: Vec<DMatrix<f64>> = (0..nb)
            .map(|b| &zinv[b] * (sigma * mu) - &x[b] - &dxp[b] * &dzp[b] * &zinv[b] - &xrdz[b])
            .collect();
        let Some((dx, dy, dl, dz)) = direction(&t_corr) else {
            status = IpmStatus::Stalled;
            break;
        };
        let (Some(ap), Some(ad)) = (max_step(&x, &dx), max_step(&z, &dz)) else {
            status = IpmStatus::Stalled;
            break;
        };
        let gamma = 0.9 + 0.09 * ap.min(ad).min(1.0);
        let ap = (gamma * ap).min(1.0);
        let ad = (gamma * ad).min(1.0);
        if ap < 1e-10 && ad < 1e-10 {
            stall += 1;
            if stall > 3 {
                status = IpmStatus::Stalled;
                break;
            }
        } else {
            stall = 0;
        }
        for b in 0..nb {
            x[b] += &dx[b] * ap;
            x[b] = sym(&x[b]);
            z[b] += &dz[b] * ad;
            z[b] = sym(&z[b]);
        }
        for (yk, d) in y.iter_mut().zip(&dy) {
            *yk += ap * d;
        }
        for (lk, d) in lam.iter_mut().zip(&dl) {
            *lk += ad * d;
        }
        if x.iter().chain(&z).any(|mm| mm.iter().any(|v| !v.is_finite())) {
            status = IpmStatus::Stalled;
            break;
        }
        if early_exit(&x, &y) {
            status = IpmStatus::EarlyExit;
            iters = it + 1;
            break;
        }
        iters = it + 1;
    }
    let dobj = dot(&prob.b, &lam);
    IpmResult {
        status,
        x,
        y,
        dobj,
        dinf: last_dinf,
        iterations: iters,
    }
}
