//! Rounds of shifted shape functions: center selection along rays of a
//! certified set, one V-s run per shifted center, and the resulting tree of
//! certificates.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::level::{ray_exit, unit};
use crate::poly::Polynomial;
use crate::vsiter::{run_a1, Certificate, DynSystem, ShapeFn, VsError, VsOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShiftError {
    #[error("no point of the ray stays inside the parent set (sigma shrunk to {sigma:.4})")]
    SelectionFailed { sigma: f64 },
    #[error("the parent set is unbounded along the requested direction")]
    UnboundedRay,
    #[error("center {center:?} is not inside the parent set (V = {value:.6})")]
    CenterOutside { center: Vec<f64>, value: f64 },
    #[error("invalid shift plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Vs(#[from] VsError),
}

/// Shape matrix as written in a plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum MatrixSpec {
    Named(String),
    Diag { diag: Vec<f64> },
    Full(Vec<Vec<f64>>),
}

impl Default for MatrixSpec {
    fn default() -> Self {
        MatrixSpec::Named("identity".into())
    }
}

impl MatrixSpec {
    pub fn diag(d: &[f64]) -> Self {
        MatrixSpec::Diag { diag: d.to_vec() }
    }

    pub fn resolve(&self, dim: usize) -> Result<DMatrix<f64>, ShiftError> {
        let m = match self {
            MatrixSpec::Named(s) if s == "identity" || s == "I" => DMatrix::identity(dim, dim),
            MatrixSpec::Named(s) => return Err(ShiftError::Plan(format!("unknown matrix name `{s}`"))),
            MatrixSpec::Diag { diag } => {
                if diag.len() != dim {
                    return Err(ShiftError::Plan(format!("diag has {} entries, expected {dim}", diag.len())));
                }
                DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(diag))
            }
            MatrixSpec::Full(rows) => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(ShiftError::Plan(format!("matrix must be {dim}x{dim}")));
                }
                DMatrix::from_fn(dim, dim, |i, j| rows[i][j])
            }
        };
        crate::poly::check_spd(&m).map_err(|e| ShiftError::Plan(e.to_string()))?;
        Ok(m)
    }
}

/// One round of shifts. Entries are the explicit `centers` followed by the
/// `directions`; `shapes` and `parents`, when given, have one item per entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftRound {
    #[serde(default)]
    pub centers: Vec<Vec<f64>>,
    #[serde(default)]
    pub directions: Vec<Vec<f64>>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(rename = "N", default)]
    pub n: MatrixSpec,
    #[serde(default)]
    pub shapes: Option<Vec<MatrixSpec>>,
    /// Parent node ids (`[]` is the root, `[1, 2]` the second child of the
    /// first child). Missing parents are inferred by containment.
    #[serde(default)]
    pub parents: Option<Vec<Vec<usize>>>,
}

fn default_sigma() -> f64 {
    0.8
}

impl Default for ShiftRound {
    fn default() -> Self {
        ShiftRound {
            centers: Vec::new(),
            directions: Vec::new(),
            sigma: default_sigma(),
            n: MatrixSpec::default(),
            shapes: None,
            parents: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftPlan {
    #[serde(default)]
    pub rounds: Vec<ShiftRound>,
}

#[derive(Clone, Debug, PartialEq)]
enum Target {
    Center(Vec<f64>),
    Direction(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    target: Target,
    n: DMatrix<f64>,
    parent: Option<Vec<usize>>,
}

impl ShiftRound {
    fn entries(&self, dim: usize) -> Result<Vec<Entry>, ShiftError> {
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(ShiftError::Plan(format!("sigma {} outside (0, 1)", self.sigma)));
        }
        let targets: Vec<Target> = self
            .centers
            .iter()
            .map(|c| Target::Center(c.clone()))
            .chain(self.directions.iter().map(|d| Target::Direction(d.clone())))
            .collect();
        let count = targets.len();
        for t in &targets {
            let v = match t {
                Target::Center(v) | Target::Direction(v) => v,
            };
            if v.len() != dim || v.iter().any(|a| !a.is_finite()) {
                return Err(ShiftError::Plan(format!("point {v:?} is not a finite {dim}-vector")));
            }
            if matches!(t, Target::Direction(_)) && unit(v).is_none() {
                return Err(ShiftError::Plan("zero direction".into()));
            }
        }
        if self.shapes.as_ref().is_some_and(|s| s.len() != count) {
            return Err(ShiftError::Plan("`shapes` needs one entry per center/direction".into()));
        }
        if self.parents.as_ref().is_some_and(|p| p.len() != count) {
            return Err(ShiftError::Plan("`parents` needs one entry per center/direction".into()));
        }
        targets
            .into_iter()
            .enumerate()
            .map(|(k, target)| {
                let spec = self.shapes.as_ref().map_or(&self.n, |s| &s[k]);
                Ok(Entry {
                    target,
                    n: spec.resolve(dim)?,
                    parent: self.parents.as_ref().map(|p| p[k].clone()),
                })
            })
            .collect()
    }
}

impl ShiftPlan {
    pub fn validate(&self, dim: usize) -> Result<(), ShiftError> {
        for r in &self.rounds {
            r.entries(dim)?;
        }
        Ok(())
    }

    /// Entries of every round with explicit centers and a shared `N`.
    pub fn from_centers(rounds: &[(&[&[f64]], MatrixSpec)]) -> Self {
        ShiftPlan {
            rounds: rounds
                .iter()
                .map(|(cs, n)| ShiftRound {
                    centers: cs.iter().map(|c| c.to_vec()).collect(),
                    n: n.clone(),
                    ..ShiftRound::default()
                })
                .collect(),
        }
    }
}

/// Distance from the origin to `{V = 1}` along `u`; infinite if `V < 1` up
/// to `t = 1e3`.
pub fn rho(v: &Polynomial, u: &[f64]) -> f64 {
    let c = v.compile();
    rho_with(|x| c.eval(x), u)
}

pub fn rho_with(g: impl Fn(&[f64]) -> f64, u: &[f64]) -> f64 {
    ray_exit(g, u, 1e3, 1e-6).unwrap_or(f64::INFINITY)
}

/// `sigma * rho * u`, shrinking `sigma` by 0.9 up to five times until the
/// point is inside `{V < 1}`.
pub fn select_center(v: &Polynomial, u: &[f64], sigma: f64) -> Result<Vec<f64>, ShiftError> {
    let c = v.compile();
    select_center_with(|x| c.eval(x), u, sigma)
}

pub fn select_center_with(g: impl Fn(&[f64]) -> f64, u: &[f64], sigma: f64) -> Result<Vec<f64>, ShiftError> {
    let u = unit(u).ok_or_else(|| ShiftError::Plan("zero direction".into()))?;
    let r = rho_with(&g, &u);
    if !r.is_finite() {
        return Err(ShiftError::UnboundedRay);
    }
    let mut s = sigma;
    for _ in 0..=5 {
        let x: Vec<f64> = u.iter().map(|a| s * r * a).collect();
        if g(&x) < 1.0 {
            return Ok(x);
        }
        s *= 0.9;
    }
    Err(ShiftError::SelectionFailed { sigma: s / 0.9 })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShiftNode {
    /// Path of child indices from the root; empty for the root.
    pub id: Vec<usize>,
    pub center: Vec<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub n: DMatrix<f64>,
    pub cert: Certificate,
    /// Index into [`ShiftTree::nodes`].
    pub parent: Option<usize>,
    /// Ray used for the further-shift check.
    pub direction: Vec<f64>,
    pub rho_before: f64,
    pub rho_after: f64,
}

impl ShiftNode {
    pub fn label(&self) -> String {
        if self.id.is_empty() {
            "0".into()
        } else {
            self.id.iter().map(|k| k.to_string()).collect()
        }
    }

    pub fn growth(&self) -> f64 {
        (self.rho_after - self.rho_before) / self.rho_before
    }
}

/// `|rho_new - rho_old| / rho_old > eps_rho`. An unbounded `rho_new` counts
/// as growth.
pub fn further_shift_check(node: &ShiftNode, eps_rho: f64) -> bool {
    if !node.rho_after.is_finite() {
        return node.rho_before.is_finite();
    }
    node.growth().abs() > eps_rho
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BranchFailure {
    pub round: usize,
    pub entry: usize,
    pub parent: Vec<usize>,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShiftTree {
    /// Root first, then nodes in round order.
    pub nodes: Vec<ShiftNode>,
    pub failures: Vec<BranchFailure>,
}

impl ShiftTree {
    pub fn certificates(&self) -> impl Iterator<Item = &Certificate> {
        self.nodes.iter().map(|n| &n.cert)
    }

    pub fn find(&self, id: &[usize]) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }
}

/// Runs the fixed-shape iteration from the parent's `V` with the shape
/// centered at `center`.
pub fn shift_branch(
    sys: &DynSystem,
    parent: &Certificate,
    center: &[f64],
    n: &DMatrix<f64>,
    opts: &VsOptions,
) -> Result<Certificate, ShiftError> {
    let value = parent.v.eval(center).map_err(VsError::from)?;
    if !(value < 1.0) {
        return Err(ShiftError::CenterOutside {
            center: center.to_vec(),
            value,
        });
    }
    let p = ShapeFn::new(n.clone(), center.to_vec())?;
    Ok(run_a1(sys, &parent.v, &p, opts)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftOptions {
    /// Relative growth of `rho` below which a node gets no children.
    pub further_tol: f64,
    /// Iteration budget of each branch.
    pub branch_iters: usize,
}

impl Default for ShiftOptions {
    fn default() -> Self {
        ShiftOptions {
            further_tol: 0.10,
            branch_iters: 30,
        }
    }
}

/// Executes the plan round by round. Branches of a round run in parallel;
/// a failing branch is recorded and pruned without aborting the tree.
pub fn run_rcomssf(
    sys: &DynSystem,
    base: Certificate,
    plan: &ShiftPlan,
    opts: &VsOptions,
    shift: &ShiftOptions,
) -> Result<ShiftTree, ShiftError> {
    let dim = sys.dim();
    plan.validate(dim)?;
    let mut tree = ShiftTree {
        nodes: vec![ShiftNode {
            id: Vec::new(),
            center: vec![0.0; dim],
            n: base.shape.n.clone(),
            cert: base,
            parent: None,
            direction: Vec::new(),
            rho_before: f64::NAN,
            rho_after: f64::NAN,
        }],
        failures: Vec::new(),
    };
    let mut branch_opts = opts.clone();
    branch_opts.max_iter = shift.branch_iters;
    let mut previous_round: Vec<usize> = vec![0];

    for (ri, round) in plan.rounds.iter().enumerate() {
        let round_no = ri + 1;
        let mut jobs = Vec::new();
        for (k, e) in round.entries(dim)?.into_iter().enumerate() {
            let fail = |tree: &mut ShiftTree, parent: Vec<usize>, reason: String| {
                log::warn!("round {round_no} entry {k}: {reason}");
                tree.failures.push(BranchFailure {
                    round: round_no,
                    entry: k,
                    parent,
                    reason,
                });
            };
            let parent = match &e.parent {
                Some(id) => match tree.find(id) {
                    Some(i) => i,
                    None => {
                        fail(&mut tree, id.clone(), "parent node does not exist".into());
                        continue;
                    }
                },
                None => infer_parent(&tree, &previous_round, &e.target),
            };
            let pnode = tree.nodes[parent].clone();
            if pnode.parent.is_some() && !further_shift_check(&pnode, shift.further_tol) {
                let reason = format!(
                    "parent {} grew {:.1}% along its ray; no further shift",
                    pnode.label(),
                    100.0 * pnode.growth()
                );
                fail(&mut tree, pnode.id.clone(), reason);
                continue;
            }
            let picked = match &e.target {
                Target::Center(c) => Ok((c.clone(), unit(c))),
                Target::Direction(d) => {
                    select_center(&pnode.cert.v, d, round.sigma).map(|c| (c, unit(d)))
                }
            };
            match picked {
                Ok((center, u)) => jobs.push((k, parent, center, u.unwrap_or_default(), e.n)),
                Err(err) => fail(&mut tree, pnode.id.clone(), err.to_string()),
            }
        }

        let results: Vec<_> = jobs
            .par_iter()
            .map(|(_, parent, center, _, n)| shift_branch(sys, &tree.nodes[*parent].cert, center, n, &branch_opts))
            .collect();

        let mut this_round = Vec::new();
        for ((k, parent, center, u, n), res) in jobs.into_iter().zip(results) {
            let pid = tree.nodes[parent].id.clone();
            match res {
                Ok(cert) => {
                    let (rho_before, rho_after) = if u.is_empty() {
                        (f64::NAN, f64::NAN)
                    } else {
                        (rho(&tree.nodes[parent].cert.v, &u), rho(&cert.v, &u))
                    };
                    let index = tree.nodes.iter().filter(|m| m.parent == Some(parent)).count() + 1;
                    let mut id = pid;
                    id.push(index);
                    log::info!(
                        "{}: node {} at {:?} rho {:.4} -> {:.4}",
                        sys.name,
                        id.iter().map(|k| k.to_string()).collect::<String>(),
                        center,
                        rho_before,
                        rho_after
                    );
                    tree.nodes.push(ShiftNode {
                        id,
                        center,
                        n,
                        cert,
                        parent: Some(parent),
                        direction: u,
                        rho_before,
                        rho_after,
                    });
                    this_round.push(tree.nodes.len() - 1);
                }
                Err(err) => {
                    log::warn!("round {round_no} entry {k}: {err}");
                    tree.failures.push(BranchFailure {
                        round: round_no,
                        entry: k,
                        parent: pid,
                        reason: err.to_string(),
                    });
                }
            }
        }
        if !this_round.is_empty() {
            previous_round = this_round;
        }
    }
    Ok(tree)
}

/// First node of the latest round whose set contains the center, then any
/// node, then the root. Directions always hang off the root.
fn infer_parent(tree: &ShiftTree, latest: &[usize], target: &Target) -> usize {
    let Target::Center(c) = target else {
        return 0;
    };
    let inside = |i: &usize| tree.nodes[*i].cert.v.eval(c).is_ok_and(|v| v < 1.0);
    latest
        .iter()
        .copied()
        .find(inside)
        .or_else(|| (0..tree.nodes.len()).find(inside))
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::poly;

    #[test]
    fn rho_of_quadratics() {
        let disk = poly(2, &[(&[2, 0], 1.0), (&[0, 2], 1.0)]);
        assert!((rho(&disk, &[1.0, 0.0]) - 1.0).abs() < 1e-6);
        let wide = poly(2, &[(&[2, 0], 0.25), (&[0, 2], 0.25)]);
        assert!((rho(&wide, &[0.0, 1.0]) - 2.0).abs() < 2e-6);
        let ell = poly(2, &[(&[2, 0], 2.7), (&[1, 1], -1.0), (&[0, 2], 0.2)]);
        assert!((rho(&ell, &[1.0, 0.0]) - 1.0 / 2.7f64.sqrt()).abs() < 1e-6);
        let strip = poly(2, &[(&[0, 2], 1.0)]);
        assert!(rho(&strip, &[1.0, 0.0]).is_infinite());
    }

    #[test]
    fn centers_on_rays() {
        let disk = poly(2, &[(&[2, 0], 1.0), (&[0, 2], 1.0)]);
        let c = select_center(&disk, &[1.0, 0.0], 0.8).unwrap();
        assert!((c[0] - 0.8).abs() < 1e-5 && c[1].abs() < 1e-12);
        let wide = poly(2, &[(&[2, 0], 0.25), (&[0, 2], 0.25)]);
        let c = select_center(&wide, &[-1.0, 0.0], 0.4).unwrap();
        assert!((c[0] + 0.8).abs() < 1e-5 && c[1].abs() < 1e-12);
    }

    #[test]
    fn thin_excursion_shrinks_sigma() {
        // Exit at t = 1.1, plus spikes above 1 too thin for the ray scan.
        let spiky = |spikes: Vec<f64>| {
            move |x: &[f64]| {
                let t = x[0];
                t * t / 1.21 + if spikes.iter().any(|a| (t - a).abs() < 1e-4) { 5.0 } else { 0.0 }
            }
        };
        let g = spiky(vec![0.88]);
        let c = select_center_with(&g, &[1.0], 0.8).unwrap();
        assert!((c[0] - 0.792).abs() < 1e-5);
        assert!(g(&c) < 1.0);
        let every = spiky((0..6).map(|k| 0.88 * 0.9f64.powi(k)).collect());
        assert!(matches!(
            select_center_with(every, &[1.0], 0.8),
            Err(ShiftError::SelectionFailed { .. })
        ));
    }

    #[test]
    fn growth_check() {
        let sys = DynSystem::new("lin", vec![poly(1, &[(&[1], -1.0)])], vec![(-2.0, 2.0)]).unwrap();
        let v = poly(1, &[(&[2], 1.0)]);
        let cert = run_a1(&sys, &v, &ShapeFn::centered(DMatrix::identity(1, 1)).unwrap(), &VsOptions {
            deg_v: 2,
            max_iter: 2,
            ..VsOptions::default()
        })
        .unwrap();
        let mut node = ShiftNode {
            id: vec![1],
            center: vec![0.5],
            n: DMatrix::identity(1, 1),
            cert,
            parent: Some(0),
            direction: vec![1.0],
            rho_before: 1.0,
            rho_after: 1.0,
        };
        assert!(!further_shift_check(&node, 0.1));
        node.rho_after = 1.25;
        assert!(further_shift_check(&node, 0.1));
        node.rho_after = 1.05;
        assert!(!further_shift_check(&node, 0.1));
    }

    #[test]
    fn plan_parsing() {
        let plan: ShiftPlan = serde_json::from_str(
            r#"{"rounds":[{"centers":[[1,1],[-1,-1]],"N":"identity"},
                          {"centers":[[0,-11]],"N":{"diag":[0.25,1]},"parents":[[1]]}]}"#,
        )
        .unwrap();
        plan.validate(2).unwrap();
        assert_eq!(plan.rounds[1].n.resolve(2).unwrap()[(0, 0)], 0.25);
        let bad: Result<ShiftPlan, _> = serde_json::from_str(r#"{"rounds":[{"centres":[[1,1]]}]}"#);
        assert!(bad.is_err());
        let mismatched = ShiftPlan {
            rounds: vec![ShiftRound {
                centers: vec![vec![1.0]],
                ..ShiftRound::default()
            }],
        };
        assert!(mismatched.validate(2).is_err());
    }
}
