//! The V-s iteration: Lyapunov-equation initialization, the γ-, β- and
//! V-steps, and the fixed-shape and adaptive-shape outer loops.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{affine_shift_expand, lie_derivative, monomial_basis, CompiledPoly, Monomial, MonomialBasis, PolyError, Polynomial};
use crate::sdp::SdpStatus;
use crate::sos::{validate, Action, SosCertificate, SosConstraint, SosError, SosOptions, SosProgram, SosSolution, VarId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VsError {
    #[error("f({0}) does not vanish at the origin")]
    NotEquilibrium(usize),
    #[error("Jacobian at the origin is not Hurwitz (max real part {0:.3e})")]
    NotHurwitz(f64),
    #[error("Lyapunov equation: {0}")]
    Lyapunov(String),
    #[error("{step}-step infeasible at the initial probe {probe:e}")]
    InitialInfeasible { step: &'static str, probe: f64 },
    #[error("{step}-step: solver returned Unknown at probe {probe:e} after retry")]
    SolverUnknown { step: &'static str, probe: f64 },
    #[error("could not certify the final level set: {0}")]
    Recertify(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

impl VsError {
    /// True when a probe at the starting value failed, as opposed to a
    /// soundness or setup error.
    pub fn is_initial_infeasible(&self) -> bool {
        matches!(self, VsError::InitialInfeasible { .. })
    }
}

/// Polynomial vector field with a verified Hurwitz equilibrium at the origin.
#[derive(Clone, Debug)]
pub struct DynSystem {
    pub name: String,
    pub f: Vec<Polynomial>,
    pub domain_box: Vec<(f64, f64)>,
    compiled: Vec<CompiledPoly>,
}

impl DynSystem {
    pub fn new(name: impl Into<String>, f: Vec<Polynomial>, domain_box: Vec<(f64, f64)>) -> Result<Self, VsError> {
        let n = f.len();
        for (i, fi) in f.iter().enumerate() {
            if fi.dim() != n {
                return Err(PolyError::DimensionMismatch {
                    expected: n,
                    found: fi.dim(),
                }
                .into());
            }
            if fi.coeff(&Monomial::one(n)) != 0.0 {
                return Err(VsError::NotEquilibrium(i));
            }
        }
        if domain_box.len() != n || domain_box.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(VsError::Config(format!("domain box must have {n} increasing intervals")));
        }
        let sys = DynSystem {
            name: name.into(),
            compiled: f.iter().map(Polynomial::compile).collect(),
            f,
            domain_box,
        };
        let worst = sys.max_real_eigenvalue();
        if !(worst < -1e-9) {
            return Err(VsError::NotHurwitz(worst));
        }
        Ok(sys)
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn jacobian_at_origin(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.f[i].coeff(&Monomial::var(n, j)))
    }

    pub fn max_real_eigenvalue(&self) -> f64 {
        self.jacobian_at_origin()
            .complex_eigenvalues()
            .iter()
            .map(|c| c.re)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(&self.compiled) {
            *o = f.eval(x);
        }
    }

    pub fn degree(&self) -> i32 {
        self.f.iter().map(Polynomial::degree).max().unwrap_or(0)
    }
}

/// `V0 = x'Px` with `A'P + PA = -Q`, solved through the Kronecker form.
pub fn init_lf(sys: &DynSystem, q: &DMatrix<f64>) -> Result<Polynomial, VsError> {
    let p = lyapunov(&sys.jacobian_at_origin(), q)?;
    Ok(affine_shift_expand(&p, &vec![0.0; sys.dim()])?)
}

pub fn lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>, VsError> {
    let n = a.nrows();
    if q.nrows() != n || q.ncols() != n {
        return Err(VsError::Lyapunov(format!("Q must be {n}x{n}")));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    let k = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = -nalgebra::DVector::from_column_slice(q.as_slice());
    let vec_p = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| VsError::Lyapunov("singular Kronecker system".into()))?;
    let p = DMatrix::from_column_slice(n, n, vec_p.as_slice());
    let p = (&p + p.transpose()) * 0.5;
    if p.clone().cholesky().is_none() {
        return Err(VsError::Lyapunov("solution is not positive definite".into()));
    }
    Ok(p)
}

/// Quadratic shape function `(x - center)' N (x - center)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeFn {
    #[serde(with = "crate::serde_matrix")]
    pub n: DMatrix<f64>,
    pub center: Vec<f64>,
}

impl ShapeFn {
    pub fn new(n: DMatrix<f64>, center: Vec<f64>) -> Result<Self, VsError> {
        affine_shift_expand(&n, &center)?;
        Ok(ShapeFn { n, center })
    }

    pub fn centered(n: DMatrix<f64>) -> Result<Self, VsError> {
        let dim = n.nrows();
        Self::new(n, vec![0.0; dim])
    }

    /// Shape taken from the quadratic part of `v`, centered at the origin.
    pub fn from_quadratic(v: &Polynomial) -> Result<Self, VsError> {
        Self::centered(v.quadratic_form_matrix())
    }

    pub fn poly(&self) -> Polynomial {
        affine_shift_expand(&self.n, &self.center).expect("validated on construction")
    }

    /// Bounding box of `{p <= level}` enlarged `scale` times about the center.
    pub fn bounding_box(&self, level: f64, scale: f64) -> Vec<(f64, f64)> {
        let inv = self.n.clone().try_inverse().expect("shape matrix is positive definite");
        self.center
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let r = scale * (level.max(0.0) * inv[(i, i)]).sqrt();
                (c - r, c + r)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VsOptions {
    pub deg_v: u32,
    pub max_iter: usize,
    /// Relative β-change stopping tolerance.
    pub eps_tol: f64,
    /// `l1 = l2 = eps_l * x'x`.
    pub eps_l: f64,
    pub bisect_tol: f64,
    pub gamma0: f64,
    pub beta0: f64,
    pub gamma_max: f64,
    pub beta_max: f64,
    pub deg_s1: Option<u32>,
    pub deg_s2: Option<u32>,
    pub v_step: VStepMode,
    pub sos: SosOptions,
}

/// How the V-step picks a point of its feasible set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VStepMode {
    /// Back off from the largest reachable containment level.
    Level,
    /// Blend the centered solution toward the one minimizing the mean of `V`
    /// over a box around the shape set.
    Volume,
}

impl Default for VsOptions {
    fn default() -> Self {
        VsOptions {
            deg_v: 4,
            max_iter: 30,
            eps_tol: 1e-3,
            eps_l: 1e-6,
            bisect_tol: 1e-3,
            gamma0: 1e-4,
            beta0: 1e-6,
            gamma_max: 1e3,
            beta_max: 1e4,
            deg_s1: None,
            deg_s2: None,
            v_step: VStepMode::Volume,
            sos: SosOptions::default(),
        }
    }
}

fn round_even(d: i32) -> u32 {
    let d = d.max(0) as u32;
    d + d % 2
}

impl VsOptions {
    pub fn validate(&self) -> Result<(), VsError> {
        let bad = |m: &str| Err(VsError::Config(m.to_string()));
        if self.deg_v < 2 || self.deg_v % 2 == 1 {
            return bad("deg_V must be even and at least 2");
        }
        if self.max_iter == 0 {
            return bad("N_I must be positive");
        }
        for (name, v) in [
            ("eps_tol", self.eps_tol),
            ("eps_l", self.eps_l),
            ("bisect_tol", self.bisect_tol),
            ("gamma0", self.gamma0),
            ("beta0", self.beta0),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if !(self.gamma_max > self.gamma0 && self.beta_max > self.beta0) {
            return bad("bisection caps must exceed the initial probes");
        }
        for d in [self.deg_s1, self.deg_s2].into_iter().flatten() {
            if d % 2 == 1 {
                return bad("multiplier degrees must be even");
            }
        }
        if self.deg_s2 == Some(0) {
            return bad("deg_s2 must be at least 2 (no constant term)");
        }
        Ok(())
    }

    /// Smallest even degree with `deg p + deg s1 >= deg V`.
    pub fn s1_degree(&self, p: &ShapeFn) -> u32 {
        self.deg_s1
            .unwrap_or_else(|| round_even(self.deg_v as i32 - p.poly().degree()))
    }

    /// `deg V̇ - deg V` rounded up to even, at least 2.
    pub fn s2_degree(&self, sys: &DynSystem) -> u32 {
        self.deg_s2
            .unwrap_or_else(|| round_even(sys.degree() - 1).max(2))
    }

    fn deep(&self) -> SosOptions {
        let mut o = self.sos;
        o.sdp.early_exit = false;
        o
    }
}

fn eps_xx(dim: usize, eps: f64) -> Polynomial {
    let mut terms = Vec::with_capacity(dim);
    for i in 0..dim {
        let mut e = vec![0; dim];
        e[i] = 2;
        terms.push((Monomial::new(e), eps));
    }
    Polynomial::from_terms(dim, terms)
}

/// `-(V̇ + eps x'x) - (γ - V) s2` SOS with `s2` SOS, no constant term.
pub fn gamma_program(sys: &DynSystem, v: &Polynomial, gamma: f64, deg_s2: u32, eps: f64) -> Result<(SosProgram, VarId), VsError> {
    let n = sys.dim();
    let vdot = lie_derivative(v, &sys.f)?;
    let known = (&vdot + &eps_xx(n, eps)).scale(-1.0);
    let mut prog = SosProgram::new(n);
    let s2 = prog.sos_var("s2", deg_s2, true);
    prog.add(SosConstraint::new("gamma", known).with(s2, Action::Mul(v.add_constant(-gamma))));
    Ok((prog, s2))
}

/// `(γ - V) - (β - p) s1` SOS with `s1` SOS.
pub fn beta_program(v: &Polynomial, gamma: f64, p: &Polynomial, beta: f64, deg_s1: u32) -> Result<(SosProgram, VarId), VsError> {
    let n = v.dim();
    let mut prog = SosProgram::new(n);
    let s1 = prog.sos_var("s1", deg_s1, false);
    let known = (-v).add_constant(gamma);
    prog.add(SosConstraint::new("beta", known).with(s1, Action::Mul(p.add_constant(-beta))));
    Ok((prog, s1))
}

/// `V - eps x'x` SOS.
pub fn positivity_program(v: &Polynomial, eps: f64) -> SosProgram {
    let mut prog = SosProgram::new(v.dim());
    prog.add(SosConstraint::new("positivity", v - &eps_xx(v.dim(), eps)));
    prog
}

/// What the V-step optimizes over its feasible set.
#[derive(Clone, Debug, PartialEq)]
pub enum VObjective {
    /// Pure feasibility at the fixed level.
    Feasible,
    /// Containment level as a free scalar `b`, maximized. Any solution with
    /// `b >= β` also satisfies the fixed-level constraints, since
    /// `(b - β) s1` is SOS.
    Level,
    /// Minimize the mean of `V` over a box at the fixed level.
    Volume(Vec<(f64, f64)>),
}

/// Mean of a monomial over an axis-aligned box.
pub fn box_mean(m: &Monomial, bounds: &[(f64, f64)]) -> f64 {
    m.exponents()
        .iter()
        .zip(bounds)
        .map(|(&a, &(lo, hi))| {
            let k = f64::from(a + 1);
            (hi.powf(k) - lo.powf(k)) / (k * (hi - lo))
        })
        .product()
}

/// The three V-step constraints with `s1`, `s2`, `γ` fixed and `β` fixed
/// unless the objective lifts it. Returns the program, the `V` variable and
/// the level variable when lifted.
#[allow(clippy::too_many_arguments)]
pub fn v_program(
    sys: &DynSystem,
    s1: &Polynomial,
    s2: &Polynomial,
    beta: f64,
    gamma: f64,
    p: &Polynomial,
    basis: MonomialBasis,
    eps: f64,
    objective: &VObjective,
) -> Result<(SosProgram, VarId, Option<VarId>), VsError> {
    let n = sys.dim();
    let l = eps_xx(n, eps);
    let mut prog = SosProgram::new(n);
    let v = prog.free_var("V", basis.clone());
    let c1 = SosConstraint::new("gamma", &(-&l) - &s2.scale(gamma))
        .with(
            v,
            Action::Lie {
                field: sys.f.clone(),
                scale: -1.0,
            },
        )
        .with(v, Action::Mul(s2.clone()));
    let c3 = SosConstraint::new("positivity", -&l).with(v, Action::Mul(Polynomial::constant(n, 1.0)));
    let mut level = None;
    let c2 = if *objective == VObjective::Level {
        let b = prog.free_var("beta", monomial_basis(n, 0, 0));
        prog.objective.push((b, Monomial::one(n), -1.0));
        level = Some(b);
        SosConstraint::new("beta", &Polynomial::constant(n, gamma) + &p.try_mul(s1)?)
            .with(v, Action::Mul(Polynomial::constant(n, -1.0)))
            .with(b, Action::Mul(s1.scale(-1.0)))
    } else {
        SosConstraint::new("beta", &Polynomial::constant(n, gamma) + &p.add_constant(-beta).try_mul(s1)?)
            .with(v, Action::Mul(Polynomial::constant(n, -1.0)))
    };
    if let VObjective::Volume(bounds) = objective {
        for m in basis.iter() {
            prog.objective.push((v, m.clone(), box_mean(m, bounds)));
        }
    }
    prog.add(c1);
    prog.add(c2);
    prog.add(c3);
    Ok((prog, v, level))
}

enum Probe {
    Feasible(SosCertificate),
    Infeasible,
    Unknown,
}

fn probe(prog: &SosProgram, opts: &SosOptions) -> Result<Probe, VsError> {
    let sol = prog.solve(opts)?;
    match sol.status {
        SdpStatus::Feasible => Ok(Probe::Feasible(sol.certificate.expect("feasible carries a certificate"))),
        SdpStatus::Infeasible => Ok(Probe::Infeasible),
        SdpStatus::Unknown => {
            let mut retry = *opts;
            retry.sdp.max_iter *= 2;
            let sol = prog.solve(&retry)?;
            Ok(match sol.status {
                SdpStatus::Feasible => Probe::Feasible(sol.certificate.expect("feasible carries a certificate")),
                SdpStatus::Infeasible => Probe::Infeasible,
                SdpStatus::Unknown => {
                    log::debug!("probe stayed Unknown after retry (phase-I t = {:.3e}); treated as infeasible", sol.phase1_t);
                    Probe::Unknown
                }
            })
        }
    }
}

/// Result of a bisection: the largest probed-feasible value and its
/// certificate.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub value: f64,
    pub cert: SosCertificate,
    /// The bracket hit its cap while still feasible.
    pub capped: bool,
    pub probes: usize,
}

struct Bracket {
    start: f64,
    hint: Option<f64>,
    cap: f64,
    rel_tol: f64,
    step: &'static str,
}

fn bisect(b: Bracket, mut run: impl FnMut(f64) -> Result<Probe, VsError>) -> Result<StepResult, VsError> {
    let mut probes = 1;
    let mut cert = match run(b.start)? {
        Probe::Feasible(c) => c,
        Probe::Infeasible => return Err(VsError::InitialInfeasible { step: b.step, probe: b.start }),
        Probe::Unknown => return Err(VsError::SolverUnknown { step: b.step, probe: b.start }),
    };
    let mut lo = b.start;
    let mut hi = None;
    let done = |lo, cert, capped, probes| {
        Ok(StepResult {
            value: lo,
            cert,
            capped,
            probes,
        })
    };
    if let Some(h) = b.hint.filter(|&h| h > lo && h <= b.cap) {
        probes += 1;
        match run(h)? {
            Probe::Feasible(c) => {
                lo = h;
                cert = c;
                if h == b.cap {
                    return done(lo, cert, true, probes);
                }
            }
            _ => hi = Some(h),
        }
    }
    let mut hi = match hi {
        Some(h) => h,
        None => {
            let mut cand = if lo < 1.0 { 1.0 } else { 2.0 * lo };
            loop {
                cand = cand.min(b.cap);
                probes += 1;
                match run(cand)? {
                    Probe::Feasible(c) => {
                        lo = cand;
                        cert = c;
                        if cand >= b.cap {
                            return done(lo, cert, true, probes);
                        }
                        cand *= 2.0;
                    }
                    _ => break cand,
                }
            }
        }
    };
    while hi - lo > b.rel_tol * lo {
        let mid = if hi > 4.0 * lo { (lo * hi).sqrt() } else { 0.5 * (lo + hi) };
        probes += 1;
        match run(mid)? {
            Probe::Feasible(c) => {
                lo = mid;
                cert = c;
            }
            _ => hi = mid,
        }
    }
    done(lo, cert, false, probes)
}

/// Largest γ with `{V <= γ} \ {0}` certified to have `V̇ < 0`.
pub fn gamma_step(sys: &DynSystem, v: &Polynomial, deg_s2: u32, opts: &VsOptions, hint: Option<f64>) -> Result<StepResult, VsError> {
    let b = Bracket {
        start: opts.gamma0,
        hint,
        cap: opts.gamma_max,
        rel_tol: opts.bisect_tol,
        step: "gamma",
    };
    let build = |g| gamma_program(sys, v, g, deg_s2, opts.eps_l).map(|r| r.0);
    let r = bisect(b, |g| probe(&build(g)?, &opts.sos))?;
    recenter(r, build, opts)
}

/// Re-solves the accepted probe to phase-I optimality so the returned
/// multipliers sit well inside their feasible set.
fn recenter(mut r: StepResult, build: impl Fn(f64) -> Result<SosProgram, VsError>, opts: &VsOptions) -> Result<StepResult, VsError> {
    if let Probe::Feasible(c) = probe(&build(r.value)?, &opts.deep())? {
        r.cert = c;
    }
    Ok(r)
}

/// Largest β with `{p <= β} ⊆ {V <= γ}`.
pub fn beta_step(v: &Polynomial, gamma: f64, p: &ShapeFn, deg_s1: u32, opts: &VsOptions, hint: Option<f64>) -> Result<StepResult, VsError> {
    let pp = p.poly();
    let b = Bracket {
        start: opts.beta0,
        hint,
        cap: opts.beta_max,
        rel_tol: opts.bisect_tol,
        step: "beta",
    };
    let build = |beta| beta_program(v, gamma, &pp, beta, deg_s1).map(|r| r.0);
    let r = bisect(b, |beta| probe(&build(beta)?, &opts.sos))?;
    recenter(r, build, opts)
}

/// Feasibility search for a new `V` (monomials of degree 2..deg V) with the
/// multipliers held fixed. `None` when infeasible.
#[allow(clippy::too_many_arguments)]
pub fn v_step(
    sys: &DynSystem,
    s1: &Polynomial,
    s2: &Polynomial,
    beta: f64,
    gamma: f64,
    p: &ShapeFn,
    opts: &VsOptions,
) -> Result<Option<(Polynomial, SosCertificate)>, VsError> {
    let basis = monomial_basis(sys.dim(), 2, opts.deg_v);
    let shape = p.poly();
    let fixed = |level: f64| -> Result<Option<(Polynomial, SosCertificate)>, VsError> {
        let (prog, v, _) = v_program(sys, s1, s2, level, gamma, &shape, basis.clone(), opts.eps_l, &VObjective::Feasible)?;
        Ok(match probe(&prog, &opts.deep())? {
            Probe::Feasible(cert) => Some((cert.value(v).clone(), cert)),
            _ => None,
        })
    };
    if opts.v_step == VStepMode::Volume {
        let Some((_, center)) = fixed(beta)? else {
            log::debug!("v-step at beta {beta:.6e} found no feasible V");
            return Ok(None);
        };
        let (feasible, v, _) = v_program(sys, s1, s2, beta, gamma, &shape, basis.clone(), opts.eps_l, &VObjective::Feasible)?;
        let bounds = p.bounding_box(beta, 2.0);
        let (prog, _, _) = v_program(sys, s1, s2, beta, gamma, &shape, basis, opts.eps_l, &VObjective::Volume(bounds))?;
        if let Ok(SosSolution {
            certificate: Some(best),
            ..
        }) = prog.solve(&opts.sos)
        {
            for theta in [0.8, 0.5, 0.25] {
                let mixed = best.blend(&center, theta);
                if validate(&mixed, &feasible, &opts.sos)?.ok {
                    return Ok(Some((mixed.value(v).clone(), mixed)));
                }
            }
        }
        return Ok(Some((center.value(v).clone(), center)));
    }
    // Estimate the largest containment level reachable with these
    // multipliers, then back off from it so the returned V is interior.
    let (prog, _, level) = v_program(sys, s1, s2, beta, gamma, &shape, basis.clone(), opts.eps_l, &VObjective::Level)?;
    let sol = prog.solve(&opts.sos)?;
    let one = Monomial::one(sys.dim());
    let validated = match (&sol.certificate, level) {
        (Some(c), Some(b)) => c.value(b).coeff(&one),
        _ => f64::NEG_INFINITY,
    };
    let reach = validated.max(-sol.objective_estimate);
    if reach.is_finite() && reach > beta * (1.0 + opts.bisect_tol) {
        for theta in [0.9, 0.5, 0.25] {
            let target = beta + theta * (reach - beta);
            if let Some(found) = fixed(target)? {
                log::debug!("v-step lifted level {beta:.6e} -> {target:.6e} (reach {reach:.6e})");
                return Ok(Some(found));
            }
        }
    }
    fixed(beta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Converged,
    Infeasible,
    MaxIter,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Converged => "converged",
            StopReason::Infeasible => "infeasible",
            StopReason::MaxIter => "max_iter",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub gamma: f64,
    pub beta: f64,
    pub gamma_probes: usize,
    pub beta_probes: usize,
    pub residual: f64,
    pub min_eig: f64,
    pub v_step: bool,
}

impl fmt::Display for IterRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} gamma={:.6e} beta={:.6e} probes={}/{} residual={:.2e} min_eig={:.2e} v_step={}",
            self.iteration,
            self.gamma,
            self.beta,
            self.gamma_probes,
            self.beta_probes,
            self.residual,
            self.min_eig,
            if self.v_step { "ok" } else { "infeasible" }
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFlags {
    /// γ reached its cap: `V̇ < 0` on every probed sublevel set.
    pub globally_stable: bool,
    /// β reached its cap.
    pub shape_exhausted: bool,
    /// The adaptive shape was rejected at least once (quadratic part not PD).
    pub shape_not_pd: bool,
}

/// Final Lyapunov function with certified set `{V < 1}` and its witnesses.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Certificate {
    pub v: Polynomial,
    pub deg_s2: u32,
    /// ε of the decrease certificate `-(V̇ + ε x'x) - (1 - V) s2`.
    pub eps_decrease: f64,
    /// ε of the positivity certificate `V - ε x'x`.
    pub eps_positive: f64,
    pub decrease_cert: SosCertificate,
    pub positivity_cert: SosCertificate,
    /// β-step witness of the last completed iteration.
    pub beta_cert: Option<SosCertificate>,
    pub shape: ShapeFn,
    pub beta_history: Vec<f64>,
    pub gamma_history: Vec<f64>,
    pub iterations_used: usize,
    pub stop_reason: StopReason,
    pub log: Vec<IterRecord>,
    pub flags: RunFlags,
}

/// Certifies `{V <= 1}` for the given `V`, rescaling `V` if level 1 is not
/// certifiable. Returns the (possibly rescaled) `V` and both witnesses.
pub fn certify_unit_level(
    sys: &DynSystem,
    v: &Polynomial,
    deg_s2: u32,
    opts: &VsOptions,
) -> Result<(Polynomial, f64, SosCertificate, f64, SosCertificate), VsError> {
    let mut v = v.clone();
    let mut decrease = None;
    for attempt in 0..4 {
        let (prog, _) = gamma_program(sys, &v, 1.0, deg_s2, opts.eps_l)?;
        if let Probe::Feasible(c) = probe(&prog, &opts.sos)? {
            decrease = Some(c);
            break;
        }
        if attempt == 3 {
            break;
        }
        let g = gamma_step(sys, &v, deg_s2, opts, None)?;
        let shrink = 1.0 - 1e-3 * f64::from(attempt);
        log::debug!("level 1 not certified; rescaling by gamma={:.6e}", g.value);
        v = v.scale(1.0 / (g.value * shrink));
    }
    let decrease = decrease.ok_or_else(|| VsError::Recertify("decrease condition at level 1".into()))?;
    for eps in [opts.eps_l, opts.eps_l * 1e-3] {
        if let Probe::Feasible(c) = probe(&positivity_program(&v, eps), &opts.sos)? {
            return Ok((v, opts.eps_l, decrease, eps, c));
        }
    }
    Err(VsError::Recertify("positivity of V".into()))
}

/// Algorithm with a fixed shape function.
pub fn run_a1(sys: &DynSystem, v0: &Polynomial, p0: &ShapeFn, opts: &VsOptions) -> Result<Certificate, VsError> {
    run_vs(sys, v0, p0, false, opts)
}

/// Algorithm with the shape replaced by the quadratic part of each new `V`.
pub fn run_a2(sys: &DynSystem, v0: &Polynomial, p0: &ShapeFn, opts: &VsOptions) -> Result<Certificate, VsError> {
    run_vs(sys, v0, p0, true, opts)
}

pub fn run_vs(sys: &DynSystem, v0: &Polynomial, p0: &ShapeFn, adaptive: bool, opts: &VsOptions) -> Result<Certificate, VsError> {
    opts.validate()?;
    if v0.dim() != sys.dim() || p0.center.len() != sys.dim() {
        return Err(PolyError::DimensionMismatch {
            expected: sys.dim(),
            found: v0.dim(),
        }
        .into());
    }
    let deg_s2 = opts.s2_degree(sys);
    let mut v = v0.clone();
    let mut p = p0.clone();
    let mut flags = RunFlags::default();
    let mut log_records = Vec::new();
    let mut beta_history = Vec::new();
    let mut gamma_history = Vec::new();
    let mut beta_cert = None;
    let mut stop = StopReason::MaxIter;
    let mut iterations = 0;
    // V_old / γ* of the last completed iteration, whose level sets were
    // certified by that iteration's γ-step.
    let mut fallback: Option<Polynomial> = None;
    let regressed = |now: f64, before: f64| now < before * (1.0 - 10.0 * opts.bisect_tol);

    for it in 1..=opts.max_iter {
        let deg_s1 = opts.s1_degree(&p);
        let first = it == 1;
        let soft = |e: VsError| -> Result<(), VsError> {
            match e {
                VsError::InitialInfeasible { .. } | VsError::SolverUnknown { .. } if !first => Ok(()),
                e => Err(e),
            }
        };
        let g = match gamma_step(sys, &v, deg_s2, opts, (!first).then_some(1.0)) {
            Ok(g) => g,
            Err(e) => {
                soft(e)?;
                stop = StopReason::Infeasible;
                break;
            }
        };
        flags.globally_stable |= g.capped;
        let b = match beta_step(&v, g.value, &p, deg_s1, opts, beta_history.last().copied()) {
            Ok(b) => b,
            Err(e) => {
                soft(e)?;
                stop = StopReason::Infeasible;
                break;
            }
        };
        // The previous V-step witnessed γ >= 1 and β >= β_prev; falling short
        // means the solver lost the certificate, not that the set shrank.
        if let (Some(old), Some(&beta_prev)) = (&fallback, beta_history.last()) {
            if !adaptive && (regressed(g.value, 1.0) || regressed(b.value, beta_prev)) {
                log::warn!(
                    "{}: iteration {it} regressed (gamma {:.6e}, beta {:.6e} < {beta_prev:.6e}); keeping previous V",
                    sys.name,
                    g.value,
                    b.value
                );
                v = old.clone();
                stop = StopReason::Infeasible;
                break;
            }
        }
        flags.shape_exhausted |= b.capped;
        iterations = it;
        gamma_history.push(g.value);
        beta_history.push(b.value);

        let s2 = g.cert.values[0].poly.clone();
        let s1 = b.cert.values[0].poly.clone();
        let next = v_step(sys, &s1, &s2, b.value, g.value, &p, opts)?;
        let rec = IterRecord {
            iteration: it,
            gamma: g.value,
            beta: b.value,
            gamma_probes: g.probes,
            beta_probes: b.probes,
            residual: g.cert.identity_residual.max(b.cert.identity_residual),
            min_eig: g.cert.min_eig.min(b.cert.min_eig),
            v_step: next.is_some(),
        };
        log::info!("{}: {rec}", sys.name);
        log_records.push(rec);
        beta_cert = Some(b.cert);
        fallback = Some(v.scale(1.0 / g.value));
        match next {
            Some((vn, _)) => v = vn.scale(1.0 / g.value),
            None => {
                v = v.scale(1.0 / g.value);
                stop = StopReason::Infeasible;
                break;
            }
        }
        if adaptive {
            match ShapeFn::from_quadratic(&v) {
                Ok(np) => {
                    log::debug!("{}: adaptive shape {}", sys.name, np.poly());
                    p = np
                }
                Err(_) => flags.shape_not_pd = true,
            }
        }
        if let [.., prev, cur] = beta_history[..] {
            if ((prev - cur) / cur).abs() < opts.eps_tol {
                stop = StopReason::Converged;
                break;
            }
        }
    }

    let (v, eps_decrease, decrease_cert, eps_positive, positivity_cert) = certify_unit_level(sys, &v, deg_s2, opts)?;
    Ok(Certificate {
        v,
        deg_s2,
        eps_decrease,
        eps_positive,
        decrease_cert,
        positivity_cert,
        beta_cert,
        shape: p,
        beta_history,
        gamma_history,
        iterations_used: iterations,
        stop_reason: stop,
        log: log_records,
        flags,
    })
}

/// Re-checks both stored witnesses of a certificate against programs rebuilt
/// from the system and `V`.
pub fn recheck(sys: &DynSystem, cert: &Certificate, opts: &SosOptions) -> Result<bool, VsError> {
    let (gprog, _) = gamma_program(sys, &cert.v, 1.0, cert.deg_s2, cert.eps_decrease)?;
    let pprog = positivity_program(&cert.v, cert.eps_positive);
    let a = crate::sos::validate(&cert.decrease_cert, &gprog, opts)?;
    let b = crate::sos::validate(&cert.positivity_cert, &pprog, opts)?;
    Ok(a.ok && b.ok && cert.eps_decrease > 0.0 && cert.eps_positive > 0.0)
}
