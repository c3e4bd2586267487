//! Run configuration, pipeline orchestration and artifact emission behind the
//! `roa` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{self, term_list, Algorithm, BenchmarkCase, SystemSpec, Truth};
use crate::level::{planar_directions, ray_crossings, ray_exit};
use crate::oracle::{
    interior_convergence, limit_cycle_2d, mc_measure, sublevel_bbox, vdot_sample_check, write_csv, ConvergenceCheck,
    Measure, SimOptions, VdotCheck,
};
use crate::poly::{poly_from_term_json, Polynomial};
use crate::rcomp::{compose_union, poly_approx, PolyFit, RNode};
use crate::rcomssf::{run_rcomssf, BranchFailure, MatrixSpec, ShiftOptions, ShiftPlan};
use crate::sos::{SosError, SosOptions};
use crate::vsiter::{init_lf, recheck, run_a1, run_a2, Certificate, DynSystem, ShapeFn, VStepMode, VsError, VsOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_GATE: i32 = 4;
pub const EXIT_UNKNOWN: i32 = 5;

pub const CONTOUR_RAYS: usize = 720;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("soundness gate failed: {0}")]
    Gate(String),
    #[error("solver Unknown: {0}")]
    Unknown(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Infeasible(_) => EXIT_INFEASIBLE,
            CliError::Gate(_) => EXIT_GATE,
            CliError::Unknown(_) => EXIT_UNKNOWN,
            CliError::Io(_) => 1,
        }
    }
}

impl From<VsError> for CliError {
    fn from(e: VsError) -> Self {
        match e {
            VsError::InitialInfeasible { .. } => CliError::Infeasible(e.to_string()),
            VsError::SolverUnknown { .. } => CliError::Unknown(e.to_string()),
            VsError::Config(_) | VsError::NotEquilibrium(_) | VsError::NotHurwitz(_) | VsError::Poly(_) => {
                CliError::Config(e.to_string())
            }
            VsError::Sos(SosError::ValidationFailed { .. }) | VsError::Recertify(_) => CliError::Gate(e.to_string()),
            other => CliError::Gate(other.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemRef {
    Benchmark(String),
    Inline(SystemSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum ShapeSpec {
    /// `"V0"`: the quadratic form of the initial function.
    Keyword(String),
    Explicit {
        #[serde(rename = "N")]
        n: MatrixSpec,
        #[serde(default)]
        center: Option<Vec<f64>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub bisect: f64,
    pub cert_tol: f64,
    pub gram_eig_tol: f64,
    /// ε of `l1 = l2 = ε x'x`.
    pub eps_l: f64,
    pub gamma0: f64,
    pub beta0: f64,
    pub gamma_max: f64,
    pub beta_max: f64,
    pub deg_s1: Option<u32>,
    pub deg_s2: Option<u32>,
    pub v_step: VStepMode,
    pub sdp_max_iter: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        let v = VsOptions::default();
        Tolerances {
            bisect: v.bisect_tol,
            cert_tol: v.sos.cert_tol,
            gram_eig_tol: v.sos.gram_eig_tol,
            eps_l: v.eps_l,
            gamma0: v.gamma0,
            beta0: v.beta0,
            gamma_max: v.gamma_max,
            beta_max: v.beta_max,
            deg_s1: None,
            deg_s2: None,
            v_step: v.v_step,
            sdp_max_iter: v.sos.sdp.max_iter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub dt: Option<f64>,
    #[serde(rename = "T")]
    pub t_max: Option<f64>,
    pub delta_conv: Option<f64>,
    pub escape: Option<f64>,
    pub mc_samples: usize,
    pub vdot_samples: usize,
    pub interior_samples: usize,
    pub interior_level: f64,
    pub min_converged: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            dt: None,
            t_max: None,
            delta_conv: None,
            escape: None,
            mc_samples: 100_000,
            vdot_samples: 2000,
            interior_samples: 500,
            interior_level: 0.99,
            min_converged: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub degree: u32,
    pub grid: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { degree: 6, grid: 60 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemRef,
    pub algorithm: Algorithm,
    #[serde(rename = "deg_V", default)]
    pub deg_v: Option<u32>,
    #[serde(rename = "N_I", default)]
    pub n_i: Option<usize>,
    #[serde(default)]
    pub eps_tol: Option<f64>,
    /// Weight of the Lyapunov equation for the initial function.
    #[serde(rename = "Q", default)]
    pub q: Option<MatrixSpec>,
    /// Explicit initial function as a term list.
    #[serde(rename = "V0", default)]
    pub v0: Option<serde_json::Value>,
    #[serde(default)]
    pub p0: Option<ShapeSpec>,
    /// Algorithm producing the root set of the shift tree.
    #[serde(default)]
    pub base_algorithm: Option<Algorithm>,
    #[serde(default)]
    pub shift_plan: Option<ShiftPlan>,
    #[serde(default)]
    pub branch_iters: Option<usize>,
    #[serde(default)]
    pub further_tol: Option<f64>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub fit: Option<FitConfig>,
    /// With `a2`, also run `a1` and report the area ordering.
    #[serde(default = "default_true")]
    pub compare_a1: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_tau() -> f64 {
    2.0
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn benchmark(name: &str, algorithm: Algorithm) -> Self {
        RunConfig {
            system: SystemRef::Benchmark(name.into()),
            algorithm,
            deg_v: None,
            n_i: None,
            eps_tol: None,
            q: None,
            v0: None,
            p0: None,
            base_algorithm: None,
            shift_plan: None,
            branch_iters: None,
            further_tol: None,
            tau: 2.0,
            tolerances: Tolerances::default(),
            oracle: OracleConfig::default(),
            fit: None,
            compare_a1: true,
            seed: 0,
            output_dir: None,
        }
    }
}

/// A configuration resolved against benchmark defaults.
#[derive(Clone, Debug)]
pub struct Problem {
    pub sys: DynSystem,
    pub v0: Polynomial,
    pub p0: ShapeFn,
    pub opts: VsOptions,
    pub algorithm: Algorithm,
    pub base: Algorithm,
    pub plan: ShiftPlan,
    pub shift: ShiftOptions,
    pub sim: SimOptions,
    pub truth: Truth,
    pub tau: f64,
    pub oracle: OracleConfig,
    pub fit: Option<FitConfig>,
    pub compare_a1: bool,
    pub seed: u64,
}

pub fn resolve(cfg: &RunConfig) -> Result<Problem, CliError> {
    let conf = |e: String| CliError::Config(e);
    let case: Option<BenchmarkCase> = match &cfg.system {
        SystemRef::Benchmark(name) => Some(bench::load(name).map_err(|e| conf(e.to_string()))?),
        SystemRef::Inline(_) => None,
    };
    let sys = match (&cfg.system, &case) {
        (_, Some(c)) => c.sys.clone(),
        (SystemRef::Inline(spec), None) => spec.build().map_err(|e| conf(e.to_string()))?,
        _ => unreachable!(),
    };
    let n = sys.dim();
    let v0 = match (&cfg.v0, &cfg.q, &case) {
        (Some(terms), _, _) => poly_from_term_json(n, terms).map_err(conf)?,
        (None, Some(q), _) => init_lf(&sys, &q.resolve(n).map_err(|e| conf(e.to_string()))?)?,
        (None, None, Some(c)) => c.v0.clone(),
        (None, None, None) => init_lf(&sys, &DMatrix::identity(n, n))?,
    };
    let p0 = match (&cfg.p0, &case) {
        (Some(ShapeSpec::Keyword(k)), _) if k == "V0" => ShapeFn::from_quadratic(&v0)?,
        (Some(ShapeSpec::Keyword(k)), _) => return Err(conf(format!("unknown p0 keyword `{k}`"))),
        (Some(ShapeSpec::Explicit { n: m, center }), _) => ShapeFn::new(
            m.resolve(n).map_err(|e| conf(e.to_string()))?,
            center.clone().unwrap_or_else(|| vec![0.0; n]),
        )?,
        (None, Some(c)) if cfg.v0.is_none() && cfg.q.is_none() => c.p0.clone(),
        (None, _) => ShapeFn::from_quadratic(&v0)?,
    };
    let t = &cfg.tolerances;
    let mut opts = VsOptions {
        deg_v: cfg.deg_v.or(case.as_ref().map(|c| c.deg_v)).unwrap_or(4),
        max_iter: cfg.n_i.or(case.as_ref().map(|c| c.n_i)).unwrap_or(30),
        eps_tol: cfg.eps_tol.unwrap_or(1e-3),
        eps_l: t.eps_l,
        bisect_tol: t.bisect,
        gamma0: t.gamma0,
        beta0: t.beta0,
        gamma_max: t.gamma_max,
        beta_max: t.beta_max,
        deg_s1: t.deg_s1,
        deg_s2: t.deg_s2.or(case.as_ref().and_then(|c| c.deg_s2)),
        v_step: t.v_step,
        sos: SosOptions::default(),
    };
    opts.sos.cert_tol = t.cert_tol;
    opts.sos.gram_eig_tol = t.gram_eig_tol;
    opts.sos.sdp.max_iter = t.sdp_max_iter;
    opts.validate()?;
    if !(cfg.tau > 0.0 && cfg.tau <= 2.0) {
        return Err(conf(format!("tau {} outside (0, 2]", cfg.tau)));
    }
    let plan = cfg
        .shift_plan
        .clone()
        .or_else(|| case.as_ref().map(|c| c.plan.clone()))
        .unwrap_or_default();
    plan.validate(n).map_err(|e| conf(e.to_string()))?;
    let mut shift = case.as_ref().map(|c| c.shift).unwrap_or_default();
    if let Some(b) = cfg.branch_iters {
        shift.branch_iters = b;
    }
    if let Some(f) = cfg.further_tol {
        shift.further_tol = f;
    }
    let mut sim = case.as_ref().map(|c| c.sim).unwrap_or_default();
    let o = &cfg.oracle;
    sim.dt = o.dt.unwrap_or(sim.dt);
    sim.t_max = o.t_max.unwrap_or(sim.t_max);
    sim.delta_conv = o.delta_conv.unwrap_or(sim.delta_conv);
    sim.escape = o.escape.unwrap_or(sim.escape);
    if !(sim.dt > 0.0 && sim.t_max > sim.dt) {
        return Err(conf("oracle dt/T must satisfy 0 < dt < T".into()));
    }
    if o.mc_samples < 1000 {
        return Err(conf("oracle.mc_samples must be at least 1000".into()));
    }
    let base = match cfg.base_algorithm.or(case.as_ref().map(|c| c.base)) {
        Some(Algorithm::Rcomssf) => return Err(conf("base_algorithm must be a1 or a2".into())),
        Some(b) => b,
        None => Algorithm::A1,
    };
    Ok(Problem {
        sys,
        v0,
        p0,
        opts,
        algorithm: cfg.algorithm,
        base,
        plan,
        shift,
        sim,
        truth: case.as_ref().map_or(Truth::Simulate, |c| c.truth),
        tau: cfg.tau,
        oracle: cfg.oracle.clone(),
        fit: cfg.fit.clone(),
        compare_a1: cfg.compare_a1,
        seed: cfg.seed,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Gates {
    pub symbolic: bool,
    pub vdot: Option<VdotCheck>,
    pub convergence: Option<ConvergenceCheck>,
    /// First failing gate.
    pub failure: Option<String>,
}

impl Gates {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

/// Runs the three independent checks on a certificate.
pub fn soundness_gates(p: &Problem, cert: &Certificate, seed: u64) -> Gates {
    let symbolic = recheck(&p.sys, cert, &p.opts.sos).unwrap_or(false);
    let vdot = vdot_sample_check(&p.sys, &cert.v, p.oracle.vdot_samples, seed).ok();
    let convergence = interior_convergence(
        &p.sys,
        &cert.v,
        p.oracle.interior_level,
        p.oracle.interior_samples,
        seed ^ 0x9e37_79b9,
        &p.sim,
    )
    .ok();
    let failure = if !symbolic {
        Some("symbolic SOS validation".to_string())
    } else {
        match (&vdot, &convergence) {
            (None, _) => Some("Lie-derivative sampling (no samples)".into()),
            (Some(v), _) if !(v.worst < 0.0) => Some(format!("Lie-derivative sampling (worst {:.3e})", v.worst)),
            (_, None) => Some("interior simulation (no samples)".into()),
            (_, Some(c)) if c.fraction() < p.oracle.min_converged => {
                Some(format!("interior simulation ({}/{} converged)", c.converged, c.samples))
            }
            _ => None,
        }
    };
    Gates {
        symbolic,
        vdot,
        convergence,
        failure,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SetRecord {
    /// Tree label: `0` for the root, `1`, `12`, ... for shifts.
    pub label: String,
    pub parent: Option<String>,
    pub center: Vec<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub n: DMatrix<f64>,
    pub rho_before: Option<f64>,
    pub rho_after: Option<f64>,
    pub cert: Certificate,
}

impl SetRecord {
    pub fn name(&self) -> String {
        format!("V{}*", self.label)
    }
}

#[derive(Clone, Debug)]
pub struct Contour {
    pub set_id: String,
    /// `(dir_index, point)`.
    pub points: Vec<(usize, Vec<f64>)>,
    pub unbounded_rays: usize,
    pub multi_crossing_rays: usize,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub problem: Problem,
    pub sets: Vec<SetRecord>,
    pub gates: Vec<Gates>,
    pub failures: Vec<BranchFailure>,
    pub union: RNode,
    pub mc_box: Vec<(f64, f64)>,
    pub set_measures: Vec<Measure>,
    pub union_measure: Measure,
    pub contours: Vec<Contour>,
    pub fit: Option<PolyFit>,
    /// A2 and A1 areas on a shared box, when requested.
    pub a1_comparison: Option<(Measure, Measure)>,
    pub report: String,
}

impl RunOutput {
    pub fn exit_code(&self) -> i32 {
        if self.gates.iter().all(Gates::passed) {
            EXIT_OK
        } else {
            EXIT_GATE
        }
    }

    pub fn first_failed_gate(&self) -> Option<String> {
        self.sets
            .iter()
            .zip(&self.gates)
            .find_map(|(s, g)| g.failure.as_ref().map(|f| format!("{}: {f}", s.name())))
    }

    pub fn union_eval(&self) -> impl Fn(&[f64]) -> f64 + Sync + '_ {
        let c = self.union.compile();
        move |x| c.eval(x)
    }
}

fn run_base(p: &Problem, alg: Algorithm) -> Result<Certificate, VsError> {
    match alg {
        Algorithm::A2 => run_a2(&p.sys, &p.v0, &p.p0, &p.opts),
        _ => run_a1(&p.sys, &p.v0, &p.p0, &p.opts),
    }
}

/// Executes a resolved problem: optimization, soundness gates, composition,
/// measures and contours. Writes nothing.
pub fn execute(p: Problem) -> Result<RunOutput, CliError> {
    let base_alg = if p.algorithm == Algorithm::Rcomssf { p.base } else { p.algorithm };
    let base = run_base(&p, base_alg)?;
    let root_n = base.shape.n.clone();
    let (sets, failures) = if p.algorithm == Algorithm::Rcomssf {
        let tree = run_rcomssf(&p.sys, base, &p.plan, &p.opts, &p.shift).map_err(|e| CliError::Config(e.to_string()))?;
        let labels: Vec<String> = tree
            .nodes
            .iter()
            .map(|nd| if nd.id.is_empty() { "0".to_string() } else { nd.id.iter().map(|k| k.to_string()).collect() })
            .collect();
        let sets = tree
            .nodes
            .iter()
            .zip(&labels)
            .map(|(nd, l)| SetRecord {
                label: l.clone(),
                parent: nd.parent.map(|i| labels[i].clone()),
                center: nd.center.clone(),
                n: nd.n.clone(),
                rho_before: nd.rho_before.is_finite().then_some(nd.rho_before),
                rho_after: nd.rho_after.is_finite().then_some(nd.rho_after),
                cert: nd.cert.clone(),
            })
            .collect();
        (sets, tree.failures)
    } else {
        let center = base.shape.center.clone();
        (
            vec![SetRecord {
                label: "0".into(),
                parent: None,
                center,
                n: root_n,
                rho_before: None,
                rho_after: None,
                cert: base,
            }],
            Vec::new(),
        )
    };

    let gates: Vec<Gates> = sets
        .iter()
        .enumerate()
        .map(|(i, s)| soundness_gates(&p, &s.cert, p.seed.wrapping_add(1000 * i as u64 + 1)))
        .collect();

    let leaves: Vec<(String, Polynomial)> = sets.iter().map(|s| (s.name(), s.cert.v.clone())).collect();
    let union = compose_union(&leaves, p.tau).map_err(|e| CliError::Config(e.to_string()))?;

    let mut comparison_cert = None;
    if p.algorithm == Algorithm::A2 && p.compare_a1 {
        comparison_cert = Some(run_a1(&p.sys, &p.v0, &p.p0, &p.opts)?);
    }

    let dim = p.sys.dim();
    let mut mc_box = vec![(0.0f64, 0.0f64); dim];
    let mut grow = |v: &Polynomial| {
        let c = v.compile();
        let bb = sublevel_bbox(&|x: &[f64]| c.eval(x), dim, 1.0, 1e3, p.seed);
        for (m, b) in mc_box.iter_mut().zip(bb) {
            m.0 = m.0.min(b.0);
            m.1 = m.1.max(b.1);
        }
    };
    for s in &sets {
        grow(&s.cert.v);
    }
    if let Some(c) = &comparison_cert {
        grow(&c.v);
    }
    let samples = p.oracle.mc_samples;
    let set_measures: Vec<Measure> = sets
        .iter()
        .map(|s| {
            let c = s.cert.v.compile();
            mc_measure(&|x: &[f64]| c.eval(x) < 1.0, &mc_box, samples, p.seed)
        })
        .collect();
    let ru = union.compile();
    let union_measure = mc_measure(&|x: &[f64]| ru.eval(x) > 0.0, &mc_box, samples, p.seed);
    let a1_comparison = comparison_cert.map(|c| {
        let cc = c.v.compile();
        let a1 = mc_measure(&|x: &[f64]| cc.eval(x) < 1.0, &mc_box, samples, p.seed);
        (set_measures[0], a1)
    });

    let mut contours = Vec::new();
    for s in &sets {
        let c = s.cert.v.compile();
        contours.extend(set_contours(&|x: &[f64]| c.eval(x), dim, &s.name()));
    }
    contours.extend(set_contours(&|x: &[f64]| 1.0 - ru.eval(x), dim, "Omega_e"));

    let fit = match &p.fit {
        Some(f) => Some(poly_approx(&union, &mc_box, f.degree, f.grid).map_err(|e| CliError::Config(e.to_string()))?),
        None => None,
    };

    let mut out = RunOutput {
        problem: p,
        sets,
        gates,
        failures,
        union,
        mc_box,
        set_measures,
        union_measure,
        contours,
        fit,
        a1_comparison,
        report: String::new(),
    };
    out.report = render_report(&out);
    Ok(out)
}

/// Boundary of `{g < 1}` by ray bisection: 720 rays in the plane, or 720
/// rays in each coordinate cross-section for `n = 3`.
pub fn set_contours(g: &(dyn Fn(&[f64]) -> f64 + Sync), dim: usize, set_id: &str) -> Vec<Contour> {
    let dirs = planar_directions(CONTOUR_RAYS);
    let planes: Vec<(Option<usize>, String)> = match dim {
        2 => vec![(None, set_id.to_string())],
        3 => (0..3).map(|k| (Some(k), format!("{set_id}|x{}=0", k + 1))).collect(),
        _ => Vec::new(),
    };
    planes
        .into_iter()
        .map(|(fixed, id)| {
            let embed = |d: &[f64; 2]| -> Vec<f64> {
                match fixed {
                    None => d.to_vec(),
                    Some(k) => {
                        let mut v = vec![0.0; 3];
                        let free: Vec<usize> = (0..3).filter(|i| *i != k).collect();
                        v[free[0]] = d[0];
                        v[free[1]] = d[1];
                        v
                    }
                }
            };
            let mut points: Vec<(usize, Vec<f64>)> = Vec::new();
            let mut unbounded = 0;
            let mut multi = 0;
            for (k, d) in dirs.iter().enumerate() {
                let u = embed(d);
                match ray_exit(g, &u, 1e3, 1e-6) {
                    Some(t) => {
                        if ray_crossings(g, &u, 3.0 * t, 600) > 1 {
                            multi += 1;
                        }
                        points.push((k, u.iter().map(|a| a * t).collect()));
                    }
                    None => unbounded += 1,
                }
            }
            if multi > 0 {
                let extent = points
                    .iter()
                    .flat_map(|(_, x)| x.iter().map(|a| a.abs()))
                    .fold(0.0f64, f64::max)
                    * 3.0;
                let mut k = CONTOUR_RAYS;
                for x in grid_boundary(g, fixed, dim, extent, 400) {
                    points.push((k, x));
                    k += 1;
                }
            }
            Contour {
                set_id: id,
                points,
                unbounded_rays: unbounded,
                multi_crossing_rays: multi,
            }
        })
        .collect()
}

/// Midpoints of grid edges where membership in `{g < 1}` flips.
fn grid_boundary(g: &(dyn Fn(&[f64]) -> f64 + Sync), fixed: Option<usize>, dim: usize, extent: f64, res: usize) -> Vec<Vec<f64>> {
    let free: Vec<usize> = (0..dim).filter(|i| Some(*i) != fixed).collect();
    let at = |i: usize, j: usize| -> Vec<f64> {
        let mut x = vec![0.0; dim];
        x[free[0]] = -extent + 2.0 * extent * i as f64 / res as f64;
        x[free[1]] = -extent + 2.0 * extent * j as f64 / res as f64;
        x
    };
    let inside: Vec<Vec<bool>> = (0..=res).map(|i| (0..=res).map(|j| g(&at(i, j)) < 1.0).collect()).collect();
    let mut out = Vec::new();
    for i in 0..=res {
        for j in 0..=res {
            for (di, dj) in [(1, 0), (0, 1)] {
                let (a, b) = (i + di, j + dj);
                if a <= res && b <= res && inside[i][j] != inside[a][b] {
                    let (p, q) = (at(i, j), at(a, b));
                    out.push(p.iter().zip(&q).map(|(x, y)| 0.5 * (x + y)).collect());
                }
            }
        }
    }
    out
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|a| format!("{a:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

fn fmt_hist(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|a| format!("{a:.6e}")).collect();
    parts.join(" ")
}

fn render_report(o: &RunOutput) -> String {
    let p = &o.problem;
    let mut r = String::new();
    let w = &mut r;
    let _ = writeln!(w, "system {} dim={}", p.sys.name, p.sys.dim());
    for (i, f) in p.sys.f.iter().enumerate() {
        let _ = writeln!(w, "  f{} = {f}", i + 1);
    }
    let _ = writeln!(
        w,
        "algorithm {} base={} deg_V={} N_I={} eps_tol={:e} tau={} seed={}",
        alg_name(p.algorithm),
        alg_name(p.base),
        p.opts.deg_v,
        p.opts.max_iter,
        p.opts.eps_tol,
        p.tau,
        p.seed
    );
    let _ = writeln!(w, "V0 = {}", p.v0);
    let _ = writeln!(w, "p0 = {}", p.p0.poly());
    let _ = writeln!(w);
    for (s, g) in o.sets.iter().zip(&o.gates) {
        let c = &s.cert;
        let _ = writeln!(w, "set {} parent={}", s.name(), s.parent.as_deref().map_or("-".to_string(), |p| format!("V{p}*")));
        let _ = writeln!(w, "  center {}", fmt_vec(&s.center));
        let _ = writeln!(w, "  shape p = {}", c.shape.poly());
        let _ = writeln!(w, "  stop {} after {} iterations", c.stop_reason, c.iterations_used);
        let _ = writeln!(
            w,
            "  flags globally_stable={} shape_exhausted={} shape_not_pd={}",
            c.flags.globally_stable, c.flags.shape_exhausted, c.flags.shape_not_pd
        );
        let _ = writeln!(w, "  beta_history {}", fmt_hist(&c.beta_history));
        let _ = writeln!(w, "  gamma_history {}", fmt_hist(&c.gamma_history));
        for rec in &c.log {
            let _ = writeln!(w, "  {rec}");
        }
        if let (Some(b), Some(a)) = (s.rho_before, s.rho_after) {
            let _ = writeln!(w, "  rho_before={b:.6} rho_after={a:.6} growth={:.2}%", 100.0 * (a - b) / b);
        }
        let _ = writeln!(w, "  V = {}", c.v);
        let _ = writeln!(
            w,
            "  certificate eps_decrease={:e} eps_positive={:e} decrease_residual={:.2e} decrease_min_eig={:.2e} positivity_residual={:.2e} positivity_min_eig={:.2e}",
            c.eps_decrease,
            c.eps_positive,
            c.decrease_cert.identity_residual,
            c.decrease_cert.min_eig,
            c.positivity_cert.identity_residual,
            c.positivity_cert.min_eig
        );
        let _ = writeln!(
            w,
            "  gate symbolic={} vdot_worst={} converged={} status={}",
            if g.symbolic { "pass" } else { "FAIL" },
            g.vdot.map_or("n/a".into(), |v| format!("{:.6e} ({} samples)", v.worst, v.samples)),
            g.convergence.map_or("n/a".into(), |c| format!("{}/{}", c.converged, c.samples)),
            g.failure.as_deref().map_or("pass".to_string(), |f| format!("FAIL ({f})"))
        );
    }
    for f in &o.failures {
        let parent = if f.parent.is_empty() { "0".to_string() } else { f.parent.iter().map(|k| k.to_string()).collect() };
        let _ = writeln!(w, "pruned round={} entry={} parent=V{}* reason={}", f.round, f.entry, parent, f.reason);
    }
    let _ = writeln!(w);
    let _ = writeln!(w, "R_e = {}", o.union);
    if let Some(f) = &o.fit {
        let _ = writeln!(
            w,
            "R_e fit (least squares, not a certificate) sign_agreement={:.4} rms={:.3e} = {}",
            f.sign_agreement, f.rms_error, f.poly
        );
    }
    let _ = writeln!(w, "mc_box {}", o.mc_box.iter().map(|(a, b)| format!("[{a:.4}, {b:.4}]")).collect::<Vec<_>>().join(" x "));
    for (s, m) in o.sets.iter().zip(&o.set_measures) {
        let _ = writeln!(w, "{}", measure_line(&s.name(), m));
    }
    let _ = writeln!(w, "{}", measure_line("Omega_e", &o.union_measure));
    if let Some((a2, a1)) = &o.a1_comparison {
        let _ = writeln!(w, "{}", measure_line("A1_reference", a1));
        let verdict = ordering(a2, a1);
        let _ = writeln!(w, "comparison a2_area={:.6} a1_area={:.6} verdict={verdict}", a2.measure, a1.measure);
    }
    for c in &o.contours {
        let dim = p.sys.dim();
        for axis in 0..dim {
            let vals = c.points.iter().map(|(_, x)| x[axis]);
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            if lo.is_finite() {
                let _ = writeln!(w, "extent set={} axis=x{} min={lo:.6} max={hi:.6}", c.set_id, axis + 1);
            }
        }
        if c.unbounded_rays > 0 || c.multi_crossing_rays > 0 {
            let _ = writeln!(
                w,
                "contour set={} unbounded_rays={} multi_crossing_rays={}",
                c.set_id, c.unbounded_rays, c.multi_crossing_rays
            );
        }
    }
    r
}

fn measure_line(name: &str, m: &Measure) -> String {
    format!(
        "measure set={name} area={:.6} stderr={:.6} samples={} seed={}",
        m.measure, m.stderr, m.samples, m.seed
    )
}

/// `a>b`, `a<b` or `tie` with a 3σ separation rule.
pub fn ordering(a: &Measure, b: &Measure) -> &'static str {
    let sep = 3.0 * (a.stderr * a.stderr + b.stderr * b.stderr).sqrt();
    if a.measure - b.measure > sep {
        "a2>a1"
    } else if b.measure - a.measure > sep {
        "a2<a1"
    } else {
        "tie"
    }
}

fn alg_name(a: Algorithm) -> &'static str {
    match a {
        Algorithm::A1 => "a1",
        Algorithm::A2 => "a2",
        Algorithm::Rcomssf => "rcomssf",
    }
}

/// Certificates in a form that can be re-checked without a solver.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertFile {
    pub system: SystemSpec,
    pub cert_tol: f64,
    pub gram_eig_tol: f64,
    pub tau: f64,
    pub sets: Vec<SetRecord>,
    /// Each `V` as a term list, for readers that skip the certificate body.
    pub v_terms: Vec<serde_json::Value>,
}

impl CertFile {
    pub fn from_run(o: &RunOutput) -> Self {
        CertFile {
            system: SystemSpec::from_system(&o.problem.sys),
            cert_tol: o.problem.opts.sos.cert_tol,
            gram_eig_tol: o.problem.opts.sos.gram_eig_tol,
            tau: o.problem.tau,
            sets: o.sets.clone(),
            v_terms: o.sets.iter().map(|s| term_list(&s.cert.v)).collect(),
        }
    }
}

/// Writes `report.txt`, `certs.json` and `contours/*.csv` under `dir`.
pub fn write_artifacts(o: &RunOutput, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir.join("contours"))?;
    std::fs::write(dir.join("report.txt"), &o.report)?;
    let certs = serde_json::to_string_pretty(&CertFile::from_run(o)).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(dir.join("certs.json"), certs)?;
    let dim = o.problem.sys.dim();
    let header = if dim == 3 { "dir_index,x1,x2,x3,set_id" } else { "dir_index,x1,x2,set_id" };
    for c in &o.contours {
        let file = c
            .set_id
            .chars()
            .map(|ch| if ch.is_ascii_alphanumeric() { ch } else { '_' })
            .collect::<String>();
        let rows = c.points.iter().map(|(k, x)| {
            let coords: Vec<String> = x.iter().map(|a| format!("{a:.9}")).collect();
            format!("{k},{},{}", coords.join(","), c.set_id)
        });
        write_csv(&dir.join("contours").join(format!("{file}.csv")), header, rows).map_err(|e| CliError::Io(std::io::Error::other(e.to_string())))?;
    }
    Ok(())
}

/// `run <config>`: returns the exit code.
pub fn cmd_run(config_path: &Path) -> i32 {
    let outcome = RunConfig::load(config_path).and_then(|cfg| {
        let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
        let dir = if dir.is_relative() {
            config_path.parent().unwrap_or(Path::new(".")).join(dir)
        } else {
            dir
        };
        let out = execute(resolve(&cfg)?)?;
        write_artifacts(&out, &dir)?;
        Ok((out, dir))
    });
    match outcome {
        Ok((out, dir)) => {
            print!("{}", out.report);
            eprintln!("artifacts written to {}", dir.display());
            if let Some(g) = out.first_failed_gate() {
                eprintln!("soundness gate failed: {g}");
            }
            out.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Line per set, `ok` or `FAIL`, from a certs file alone.
pub fn validate_certs(file: &CertFile) -> Result<Vec<(String, bool)>, CliError> {
    let sys = file.system.build().map_err(|e| CliError::Config(e.to_string()))?;
    let opts = SosOptions {
        cert_tol: file.cert_tol,
        gram_eig_tol: file.gram_eig_tol,
        ..SosOptions::default()
    };
    Ok(file
        .sets
        .iter()
        .map(|s| (s.name(), recheck(&sys, &s.cert, &opts).unwrap_or(false)))
        .collect())
}

pub fn cmd_validate_certs(path: &Path) -> i32 {
    let parsed = std::fs::read_to_string(path)
        .map_err(CliError::from)
        .and_then(|t| serde_json::from_str::<CertFile>(&t).map_err(|e| CliError::Config(e.to_string())));
    let file = match parsed {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    match validate_certs(&file) {
        Ok(lines) => {
            let mut ok = true;
            for (name, pass) in lines {
                println!("{name} {}", if pass { "ok" } else { "FAIL" });
                ok &= pass;
            }
            if ok {
                EXIT_OK
            } else {
                EXIT_GATE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Oracle boundary of a benchmark's true region of attraction as CSV rows.
pub fn true_roa_rows(name: &str) -> Result<(String, Vec<String>), CliError> {
    let case = bench::load(name).map_err(|e| CliError::Config(e.to_string()))?;
    let dim = case.sys.dim();
    if name == "vdp" {
        let cyc = limit_cycle_2d(&case.sys, [0.5, 0.0], 60.0, 40.0, 1e-3).map_err(|e| CliError::Config(e.to_string()))?;
        let rows = cyc.iter().enumerate().map(|(k, x)| format!("{k},{:.9},{:.9},true_roa", x[0], x[1])).collect();
        return Ok(("dir_index,x1,x2,set_id".into(), rows));
    }
    // Ray bisection on the membership oracle, capped at the domain box.
    let dirs = planar_directions(CONTOUR_RAYS);
    let planes: Vec<Option<usize>> = if dim == 3 { vec![Some(1)] } else { vec![None] };
    let mut rows = Vec::new();
    for fixed in planes {
        for (k, d) in dirs.iter().enumerate() {
            let u: Vec<f64> = match fixed {
                None => d.to_vec(),
                Some(_) => vec![d[0], 0.0, d[1]],
            };
            let cap = box_exit(&case.sys.domain_box, &u);
            let inside = |t: f64| case.in_true_roa(&u.iter().map(|a| a * t).collect::<Vec<_>>());
            let t = if inside(cap) {
                cap
            } else {
                let (mut lo, mut hi) = (0.0, cap);
                while hi - lo > 1e-4 * cap {
                    let mid = 0.5 * (lo + hi);
                    if inside(mid) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                lo
            };
            let coords: Vec<String> = u.iter().map(|a| format!("{:.9}", a * t)).collect();
            let tag = if t >= cap { "true_roa_box" } else { "true_roa" };
            rows.push(format!("{k},{},{tag}", coords.join(",")));
        }
    }
    let header = if dim == 3 { "dir_index,x1,x2,x3,set_id" } else { "dir_index,x1,x2,set_id" };
    Ok((header.into(), rows))
}

fn box_exit(bx: &[(f64, f64)], u: &[f64]) -> f64 {
    u.iter()
        .zip(bx)
        .filter(|(a, _)| a.abs() > 1e-12)
        .map(|(a, (lo, hi))| if *a > 0.0 { hi / a } else { lo / a })
        .fold(f64::INFINITY, f64::min)
}

pub fn cmd_true_roa(name: &str, out: Option<&Path>) -> i32 {
    match true_roa_rows(name) {
        Ok((header, rows)) => {
            let res = match out {
                Some(path) => write_csv(path, &header, rows).map_err(|e| e.to_string()),
                None => {
                    println!("{header}");
                    for r in rows {
                        println!("{r}");
                    }
                    Ok(())
                }
            };
            match res {
                Ok(()) => EXIT_OK,
                Err(e) => {
                    eprintln!("error: {e}");
                    1
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// `measure` and `extent` lines of a report, keyed by their identifying
/// fields.
pub fn report_quantities(report: &str) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for line in report.lines() {
        let mut fields = line.split_whitespace();
        let kind = fields.next().unwrap_or("");
        let kv: Vec<(&str, &str)> = fields.filter_map(|f| f.split_once('=')).collect();
        let get = |k: &str| kv.iter().find(|(a, _)| *a == k).map(|(_, v)| *v);
        match kind {
            "measure" => {
                if let (Some(s), Some(a)) = (get("set"), get("area").and_then(|v| v.parse().ok())) {
                    out.push((format!("area {s}"), a));
                }
            }
            "extent" => {
                if let (Some(s), Some(ax)) = (get("set"), get("axis")) {
                    for bound in ["min", "max"] {
                        if let Some(v) = get(bound).and_then(|v| v.parse().ok()) {
                            out.push((format!("{bound} {ax} {s}"), v));
                        }
                    }
                }
            }
            _ => {}
        }
    }
    out
}

/// Area/extent difference table between two reports.
pub fn compare_reports(a: &str, b: &str) -> String {
    let qa = report_quantities(a);
    let qb = report_quantities(b);
    let mut keys: Vec<&String> = qa.iter().map(|(k, _)| k).collect();
    for (k, _) in &qb {
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut t = String::new();
    let _ = writeln!(t, "{:<36} {:>14} {:>14} {:>14} {:>10}", "quantity", "A", "B", "B-A", "B/A");
    for k in keys {
        let va = qa.iter().find(|(x, _)| x == k).map(|(_, v)| *v);
        let vb = qb.iter().find(|(x, _)| x == k).map(|(_, v)| *v);
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        let (d, r) = match (va, vb) {
            (Some(x), Some(y)) => (format!("{:.6}", y - x), if x != 0.0 { format!("{:.4}", y / x) } else { "-".into() }),
            _ => ("-".into(), "-".into()),
        };
        let _ = writeln!(t, "{:<36} {:>14} {:>14} {:>14} {:>10}", k, f(va), f(vb), d, r);
    }
    t
}

pub fn cmd_compare(a: &Path, b: &Path) -> i32 {
    match (std::fs::read_to_string(a), std::fs::read_to_string(b)) {
        (Ok(ta), Ok(tb)) => {
            print!("{}", compare_reports(&ta, &tb));
            EXIT_OK
        }
        (Err(e), _) | (_, Err(e)) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        let bad = r#"{"system":"vdp","algorithm":"a1","deg_v":6}"#;
        assert!(matches!(RunConfig::from_json(bad), Err(CliError::Config(_))));
        let ok = r#"{"system":"vdp","algorithm":"a1","deg_V":6,"tolerances":{"bisect":1e-3}}"#;
        RunConfig::from_json(ok).unwrap();
        let typo = r#"{"system":"vdp","algorithm":"a1","tolerances":{"bisection":1e-3}}"#;
        assert!(RunConfig::from_json(typo).is_err());
        let nested = [
            r#"{"system":"vdp","algorithm":"a1","p0":{"N":"identity","centre":[0,0]}}"#,
            r#"{"system":"vdp","algorithm":"a1","p0":{"N":{"diag":[1,1],"scale":2}}}"#,
            r#"{"system":"vdp","algorithm":"rcomssf","shift_plan":{"rounds":[{"centers":[[1,1]],"n":"identity"}]}}"#,
        ];
        for text in nested {
            assert!(RunConfig::from_json(text).is_err(), "{text}");
        }
    }

    #[test]
    fn odd_degree_is_a_config_error() {
        let cfg = RunConfig::from_json(r#"{"system":"vdp","algorithm":"a1","deg_V":5}"#).unwrap();
        let err = resolve(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn inline_system_and_shape() {
        let cfg = RunConfig::from_json(
            r#"{"system":{"dim":2,"f":[[{"e":[1,0],"c":-1.0}],[{"e":[0,1],"c":-2.0}]]},
                "algorithm":"rcomssf","deg_V":2,
                "p0":{"N":{"diag":[1,2]}},
                "shift_plan":{"rounds":[{"centers":[[0.2,0]]}]}}"#,
        )
        .unwrap();
        let p = resolve(&cfg).unwrap();
        assert_eq!(p.p0.n[(1, 1)], 2.0);
        assert_eq!(p.plan.rounds.len(), 1);
        assert_eq!(p.sim.t_max, 50.0);
    }

    #[test]
    fn unknown_benchmark() {
        let cfg = RunConfig::benchmark("lorenz", Algorithm::A1);
        assert_eq!(resolve(&cfg).unwrap_err().exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn contour_of_disk() {
        let g = |x: &[f64]| 0.25 * (x[0] * x[0] + x[1] * x[1]);
        let c = set_contours(&g, 2, "disk");
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].points.len(), CONTOUR_RAYS);
        for (_, x) in &c[0].points {
            assert!(((x[0] * x[0] + x[1] * x[1]).sqrt() - 2.0).abs() < 1e-5);
        }
        let ball = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>();
        let c = set_contours(&ball, 3, "ball");
        assert_eq!(c.len(), 3);
        assert_eq!(c[1].set_id, "ball|x2=0");
        assert!(c[1].points.iter().all(|(_, x)| x[1] == 0.0));
    }

    #[test]
    fn annulus_gets_grid_fallback() {
        // {g < 1}: disk of radius 1 plus the ring 2 < r < 2.5
        let g = |x: &[f64]| {
            let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
            if r < 1.0 || (r > 2.0 && r < 2.5) {
                0.0
            } else {
                2.0
            }
        };
        let c = &set_contours(&g, 2, "ring")[0];
        assert_eq!(c.multi_crossing_rays, CONTOUR_RAYS);
        assert!(c.points.len() > CONTOUR_RAYS);
    }

    #[test]
    fn compare_table() {
        let a = "measure set=V0* area=2.000000 stderr=0.01 samples=1000 seed=1\nextent set=V0* axis=x1 min=-1.0 max=1.0\n";
        let b = "measure set=V0* area=3.000000 stderr=0.01 samples=1000 seed=1\nmeasure set=Omega_e area=4.0 stderr=0.0 samples=1000 seed=1\n";
        let t = compare_reports(a, b);
        assert!(t.contains("area V0*"));
        assert!(t.contains("1.5000"));
        assert!(t.contains("area Omega_e"));
        assert!(t.lines().any(|l| l.starts_with("min x1 V0*") && l.contains(" - ")));
    }

    #[test]
    fn ordering_rule() {
        let m = |a: f64| Measure {
            measure: a,
            stderr: 0.01,
            samples: 1000,
            seed: 0,
        };
        assert_eq!(ordering(&m(1.0), &m(1.02)), "tie");
        assert_eq!(ordering(&m(1.1), &m(1.0)), "a2>a1");
        assert_eq!(ordering(&m(0.9), &m(1.0)), "a2<a1");
    }

    #[test]
    fn box_exit_distances() {
        let bx = [(-3.0, 1.0), (-8.0, 8.0)];
        assert!((box_exit(&bx, &[1.0, 0.0]) - 1.0).abs() < 1e-12);
        assert!((box_exit(&bx, &[-1.0, 0.0]) - 3.0).abs() < 1e-12);
    }
}
