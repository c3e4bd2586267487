//! Certificate-free ground truth: fixed-step RK4 simulation, basin
//! membership, reverse-time limit cycles and Monte Carlo set measures.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::level::{ray_exit, unit};
use crate::poly::{lie_derivative, PolyError, Polynomial};
use crate::vsiter::DynSystem;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("no closed orbit detected")]
    NoCycle,
    #[error("limit cycle extraction needs a planar system, got dimension {0}")]
    NotPlanar(usize),
    #[error("could not sample the sublevel set: {0}")]
    Starved(String),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimOptions {
    pub dt: f64,
    #[serde(rename = "T")]
    pub t_max: f64,
    pub delta_conv: f64,
    pub escape: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            dt: 1e-3,
            t_max: 50.0,
            delta_conv: 1e-4,
            escape: 1e4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Converged,
    Diverged,
    Undecided,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimResult {
    pub outcome: Outcome,
    pub final_state: Vec<f64>,
    pub steps_used: usize,
}

struct Rk4 {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Rk4 {
    fn new(n: usize) -> Self {
        Rk4 {
            k: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            tmp: vec![0.0; n],
        }
    }

    /// One step of `ẋ = sign * f(x)`.
    fn step(&mut self, sys: &DynSystem, x: &mut [f64], dt: f64, sign: f64) {
        let n = x.len();
        let h = dt * sign;
        sys.eval(x, &mut self.k[0]);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k[0][i];
        }
        sys.eval(&self.tmp, &mut self.k[1]);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k[1][i];
        }
        sys.eval(&self.tmp, &mut self.k[2]);
        for i in 0..n {
            self.tmp[i] = x[i] + h * self.k[2][i];
        }
        sys.eval(&self.tmp, &mut self.k[3]);
        for i in 0..n {
            x[i] += h / 6.0 * (self.k[0][i] + 2.0 * self.k[1][i] + 2.0 * self.k[2][i] + self.k[3][i]);
        }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub fn simulate(sys: &DynSystem, x0: &[f64], opts: &SimOptions) -> SimResult {
    let mut x = x0.to_vec();
    let mut rk = Rk4::new(x.len());
    let steps = (opts.t_max / opts.dt).ceil() as usize;
    for s in 0..=steps {
        let r = norm(&x);
        if !r.is_finite() || r > opts.escape {
            return SimResult {
                outcome: Outcome::Diverged,
                final_state: x,
                steps_used: s,
            };
        }
        if r < opts.delta_conv {
            return SimResult {
                outcome: Outcome::Converged,
                final_state: x,
                steps_used: s,
            };
        }
        if s == steps {
            break;
        }
        rk.step(sys, &mut x, opts.dt, 1.0);
    }
    SimResult {
        outcome: Outcome::Undecided,
        final_state: x,
        steps_used: steps,
    }
}

/// Endpoint of a fixed-duration integration (no stopping tests).
pub fn integrate(sys: &DynSystem, x0: &[f64], dt: f64, duration: f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut rk = Rk4::new(x.len());
    let steps = (duration / dt).round() as usize;
    for _ in 0..steps {
        rk.step(sys, &mut x, dt, 1.0);
    }
    x
}

/// Simulation-based membership; `Undecided` counts as outside.
pub fn in_true_roa(sys: &DynSystem, x0: &[f64], opts: &SimOptions) -> bool {
    simulate(sys, x0, opts).outcome == Outcome::Converged
}

/// Integrates the reversed field from `seed`, drops a transient and records
/// one period, closed by a Poincaré-section return. Returns the orbit as a
/// polyline (first point not repeated).
pub fn limit_cycle_2d(
    sys: &DynSystem,
    seed: [f64; 2],
    transient_t: f64,
    record_t: f64,
    dt: f64,
) -> Result<Vec<[f64; 2]>, OracleError> {
    if sys.dim() != 2 {
        return Err(OracleError::NotPlanar(sys.dim()));
    }
    let mut x = seed.to_vec();
    let mut rk = Rk4::new(2);
    let escape = 1e4;
    let settled = |x: &[f64]| norm(x) < 1e-6;
    for _ in 0..(transient_t / dt) as usize {
        rk.step(sys, &mut x, dt, -1.0);
        if !(norm(&x) < escape) || settled(&x) {
            return Err(OracleError::NoCycle);
        }
    }
    let p0 = [x[0], x[1]];
    let mut fx = [0.0; 2];
    sys.eval(&x, &mut fx);
    // reversed flow direction is the section normal
    let nrm = [-fx[0], -fx[1]];
    let scale = norm(&nrm);
    if scale < 1e-9 {
        return Err(OracleError::NoCycle);
    }
    let side = |x: &[f64]| (x[0] - p0[0]) * nrm[0] + (x[1] - p0[1]) * nrm[1];
    let mut pts = vec![p0];
    let mut max_dist: f64 = 0.0;
    let mut prev_side = side(&x);
    for _ in 0..(record_t / dt) as usize {
        rk.step(sys, &mut x, dt, -1.0);
        if !(norm(&x) < escape) || settled(&x) {
            return Err(OracleError::NoCycle);
        }
        let d = ((x[0] - p0[0]).powi(2) + (x[1] - p0[1]).powi(2)).sqrt();
        max_dist = max_dist.max(d);
        let s = side(&x);
        if prev_side < 0.0 && s >= 0.0 && max_dist > 1e-3 && d < 0.05 * max_dist {
            return Ok(pts);
        }
        prev_side = s;
        pts.push([x[0], x[1]]);
    }
    Err(OracleError::NoCycle)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measure {
    pub measure: f64,
    pub stderr: f64,
    pub samples: usize,
    pub seed: u64,
}

/// Uniform points in an axis-aligned box, deterministic in `seed`.
pub fn sample_box(bounds: &[(f64, f64)], count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| bounds.iter().map(|&(lo, hi)| rng.gen_range(lo..hi)).collect())
        .collect()
}

pub fn box_volume(bounds: &[(f64, f64)]) -> f64 {
    bounds.iter().map(|(lo, hi)| hi - lo).product()
}

/// Monte Carlo volume of `{indicator}` inside `bounds` with its binomial
/// standard error.
pub fn mc_measure(indicator: &(dyn Fn(&[f64]) -> bool + Sync), bounds: &[(f64, f64)], samples: usize, seed: u64) -> Measure {
    let pts = sample_box(bounds, samples, seed);
    let hits = pts.par_iter().filter(|x| indicator(x)).count();
    let vol = box_volume(bounds);
    let frac = hits as f64 / samples as f64;
    Measure {
        measure: frac * vol,
        stderr: vol * (frac * (1.0 - frac) / samples as f64).sqrt(),
        samples,
        seed,
    }
}

/// Bounding box of `{g < level}` estimated from ray exits along random
/// directions (plus the coordinate axes), padded by 10%. Rays that never exit
/// below `cap` contribute `cap`.
pub fn sublevel_bbox(g: &(dyn Fn(&[f64]) -> f64 + Sync), dim: usize, level: f64, cap: f64, seed: u64) -> Vec<(f64, f64)> {
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for i in 0..dim {
        for s in [-1.0, 1.0] {
            let mut e = vec![0.0; dim];
            e[i] = s;
            dirs.push(e);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while dirs.len() < 400 * dim {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if let Some(u) = unit(&v) {
            dirs.push(u);
        }
    }
    let exits: Vec<(Vec<f64>, f64)> = dirs
        .into_par_iter()
        .map(|u| {
            let t = ray_exit(|x| g(x) / level, &u, cap, 1e-4).unwrap_or(cap);
            (u, t)
        })
        .collect();
    let mut bb = vec![(0.0_f64, 0.0_f64); dim];
    for (u, t) in exits {
        for i in 0..dim {
            bb[i].0 = bb[i].0.min(t * u[i]);
            bb[i].1 = bb[i].1.max(t * u[i]);
        }
    }
    bb.iter()
        .map(|&(lo, hi)| {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        })
        .collect()
}

/// Rejection-samples `count` points of `{g < level}` inside `bounds`.
/// Fails if the acceptance rate is hopeless.
pub fn sample_sublevel(
    g: &(dyn Fn(&[f64]) -> f64 + Sync),
    bounds: &[(f64, f64)],
    level: f64,
    count: usize,
    exclude_radius: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>, OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let budget = count.max(100) * 10_000;
    let mut tries = 0;
    while out.len() < count {
        if tries >= budget {
            return Err(OracleError::Starved(format!(
                "{} of {count} points after {tries} draws",
                out.len()
            )));
        }
        tries += 1;
        let x: Vec<f64> = bounds.iter().map(|&(lo, hi)| rng.gen_range(lo..hi)).collect();
        if norm(&x) >= exclude_radius && g(&x) < level {
            out.push(x);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VdotCheck {
    /// Largest `V̇` over the samples.
    pub worst: f64,
    pub samples: usize,
}

/// Largest `V̇` over random samples of `{V <= 1} \ {|x| < 1e-3}`.
pub fn vdot_sample_check(sys: &DynSystem, v: &Polynomial, n_samples: usize, seed: u64) -> Result<VdotCheck, OracleError> {
    let vc = v.compile();
    let vdot = lie_derivative(v, &sys.f)?.compile();
    let g = |x: &[f64]| vc.eval(x);
    let bb = sublevel_bbox(&g, sys.dim(), 1.0, 1e3, seed);
    let pts = sample_sublevel(&g, &bb, 1.0 + 1e-12, n_samples, 1e-3, seed ^ 0x5eed)?;
    let worst = pts
        .par_iter()
        .map(|x| vdot.eval(x))
        .reduce(|| f64::NEG_INFINITY, f64::max);
    Ok(VdotCheck {
        worst,
        samples: pts.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCheck {
    pub converged: usize,
    pub samples: usize,
}

impl ConvergenceCheck {
    pub fn fraction(&self) -> f64 {
        self.converged as f64 / self.samples as f64
    }
}

/// Simulates `n_samples` random points of `{V < level}` and counts how many
/// reach the origin.
pub fn interior_convergence(sys: &DynSystem, v: &Polynomial, level: f64, n_samples: usize, seed: u64, opts: &SimOptions) -> Result<ConvergenceCheck, OracleError> {
    let vc = v.compile();
    let g = |x: &[f64]| vc.eval(x);
    let bb = sublevel_bbox(&g, sys.dim(), level, 1e3, seed);
    let pts = sample_sublevel(&g, &bb, level, n_samples, 0.0, seed ^ 0xc0ffee)?;
    let converged = pts.par_iter().filter(|x| in_true_roa(sys, x, opts)).count();
    Ok(ConvergenceCheck {
        converged,
        samples: pts.len(),
    })
}

/// Writes rows as CSV with the given header.
pub fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<(), OracleError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{header}")?;
    for r in rows {
        writeln!(f, "{r}")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::poly;

    fn vdp() -> DynSystem {
        DynSystem::new(
            "vdp",
            vec![
                poly(2, &[(&[0, 1], -1.0)]),
                poly(2, &[(&[1, 0], 1.0), (&[0, 1], -5.0), (&[2, 1], 5.0)]),
            ],
            vec![(-3.0, 3.0); 2],
        )
        .unwrap()
    }

    fn linear() -> DynSystem {
        DynSystem::new(
            "lin",
            vec![poly(2, &[(&[1, 0], -1.0)]), poly(2, &[(&[0, 1], -2.0)])],
            vec![(-1.0, 1.0); 2],
        )
        .unwrap()
    }

    fn long() -> SimOptions {
        SimOptions {
            t_max: 150.0,
            ..SimOptions::default()
        }
    }

    #[test]
    fn simulate_outcomes() {
        let sys = vdp();
        assert_eq!(simulate(&sys, &[0.1, 0.1], &long()).outcome, Outcome::Converged);
        assert_eq!(simulate(&sys, &[3.0, 3.0], &long()).outcome, Outcome::Diverged);
        let r = simulate(&sys, &[0.0, 0.0], &SimOptions::default());
        assert_eq!((r.outcome, r.steps_used), (Outcome::Converged, 0));
        let r = simulate(&sys, &[f64::NAN, 0.0], &SimOptions::default());
        assert_eq!(r.outcome, Outcome::Diverged);
    }

    #[test]
    fn rk4_fourth_order() {
        let sys = vdp();
        let x0 = [0.5, 0.5];
        let reference = integrate(&sys, &x0, 1e-4, 1.0);
        let err = |dt| {
            let e = integrate(&sys, &x0, dt, 1.0);
            norm(&[e[0] - reference[0], e[1] - reference[1]])
        };
        let ratio = err(0.02) / err(0.01);
        assert!((8.0..=24.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn vdp_limit_cycle_brackets_basin() {
        let sys = vdp();
        let cycle = limit_cycle_2d(&sys, [0.5, 0.0], 60.0, 60.0, 1e-3).unwrap();
        assert!(cycle.len() > 100);
        for r in cycle.iter().step_by(cycle.len() / 12) {
            let inner = [0.95 * r[0], 0.95 * r[1]];
            let outer = [1.05 * r[0], 1.05 * r[1]];
            assert!(in_true_roa(&sys, &inner, &long()), "{inner:?}");
            assert!(!in_true_roa(&sys, &outer, &long()), "{outer:?}");
        }
        // the field is odd, so the orbit is symmetric about the origin
        let dist = |p: [f64; 2]| {
            cycle
                .iter()
                .map(|q| ((p[0] + q[0]).powi(2) + (p[1] + q[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        };
        let haus = cycle.iter().map(|&p| dist(p)).fold(0.0, f64::max);
        assert!(haus < 1e-2, "hausdorff {haus}");
    }

    #[test]
    fn linear_has_no_cycle() {
        assert!(matches!(
            limit_cycle_2d(&linear(), [0.5, 0.0], 20.0, 20.0, 1e-3),
            Err(OracleError::NoCycle)
        ));
    }

    #[test]
    fn mc_known_areas() {
        let disk = |x: &[f64]| x[0] * x[0] + x[1] * x[1] < 1.0;
        let m = mc_measure(&disk, &[(-1.0, 1.0); 2], 100_000, 7);
        assert!((m.measure - std::f64::consts::PI).abs() < 3.0 * m.stderr, "{m:?}");
        assert_eq!(m, mc_measure(&disk, &[(-1.0, 1.0); 2], 100_000, 7));
        let empty = |_: &[f64]| false;
        assert_eq!(mc_measure(&empty, &[(-1.0, 1.0); 2], 1000, 1).measure, 0.0);
        let v0 = |x: &[f64]| 0.25 * x[0] * x[0] + 0.25 * x[1] * x[1] < 1.0;
        let m = mc_measure(&v0, &[(-3.0, 3.0); 2], 100_000, 3);
        assert!((m.measure - 4.0 * std::f64::consts::PI).abs() < 3.0 * m.stderr);
    }

    #[test]
    fn vdot_check_detects_violation() {
        let sys = vdp();
        // x1^2 + x2^2 < 4 reaches |x1| > 1 where V̇ > 0
        let v = poly(2, &[(&[2, 0], 0.25), (&[0, 2], 0.25)]);
        assert!(vdot_sample_check(&sys, &v, 2000, 1).unwrap().worst > 0.0);
        let small = poly(2, &[(&[2, 0], 4.0), (&[0, 2], 4.0)]);
        assert!(vdot_sample_check(&sys, &small, 2000, 1).unwrap().worst < 0.0);
        let lin = poly(2, &[(&[2, 0], 1e-2), (&[0, 2], 1e-2)]);
        assert!(vdot_sample_check(&linear(), &lin, 2000, 1).unwrap().worst < 0.0);
    }

    #[test]
    fn bbox_of_disk() {
        let g = |x: &[f64]| x[0] * x[0] + x[1] * x[1];
        let bb = sublevel_bbox(&g, 2, 1.0, 1e3, 0);
        for (lo, hi) in bb {
            assert!((lo + 1.1).abs() < 1e-2 && (hi - 1.1).abs() < 1e-2);
        }
    }
}
