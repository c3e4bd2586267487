//! The five benchmark systems with their initializations and shift plans.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::{in_true_roa, SimOptions};
use crate::poly::{poly, poly_from_term_json, Polynomial};
use crate::rcomssf::{MatrixSpec, ShiftOptions, ShiftPlan, ShiftRound};
use crate::vsiter::{init_lf, DynSystem, ShapeFn, VsError};

pub const NAMES: [&str; 5] = ["vdp", "bistable", "saddle", "hahn", "taylor3d"];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown benchmark `{0}` (expected one of vdp, bistable, saddle, hahn, taylor3d)")]
    Unknown(String),
    #[error("system description: {0}")]
    Spec(String),
    #[error(transparent)]
    Vs(#[from] VsError),
}

/// A vector field as written in configs: one term list per component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub dim: usize,
    pub f: Vec<serde_json::Value>,
    #[serde(default)]
    pub domain_box: Option<Vec<(f64, f64)>>,
}

fn default_name() -> String {
    "system".into()
}

impl SystemSpec {
    pub fn build(&self) -> Result<DynSystem, BenchError> {
        if self.f.len() != self.dim {
            return Err(BenchError::Spec(format!("{} components for dim {}", self.f.len(), self.dim)));
        }
        let f = self
            .f
            .iter()
            .map(|c| poly_from_term_json(self.dim, c))
            .collect::<Result<Vec<_>, _>>()
            .map_err(BenchError::Spec)?;
        let bx = self.domain_box.clone().unwrap_or_else(|| vec![(-3.0, 3.0); self.dim]);
        if bx.len() != self.dim || bx.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(BenchError::Spec("domain_box needs one increasing (lo, hi) pair per axis".into()));
        }
        Ok(DynSystem::new(self.name.clone(), f, bx)?)
    }

    pub fn from_system(sys: &DynSystem) -> Self {
        SystemSpec {
            name: sys.name.clone(),
            dim: sys.dim(),
            f: sys.f.iter().map(term_list).collect(),
            domain_box: Some(sys.domain_box.clone()),
        }
    }
}

/// `[{"e": [...], "c": ...}, ...]`
pub fn term_list(p: &Polynomial) -> serde_json::Value {
    p.terms()
        .map(|(m, c)| serde_json::json!({"e": m.exponents(), "c": c}))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    A1,
    A2,
    Rcomssf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    /// Forward simulation.
    Simulate,
    /// `x1 x2 < 1`.
    Hahn,
}

#[derive(Clone, Debug)]
pub struct BenchmarkCase {
    pub name: &'static str,
    pub sys: DynSystem,
    pub v0: Polynomial,
    pub p0: ShapeFn,
    pub deg_v: u32,
    pub n_i: usize,
    /// Decrease-multiplier degree when the default budget is too small.
    pub deg_s2: Option<u32>,
    /// Algorithm whose result seeds the shifts.
    pub base: Algorithm,
    pub plan: ShiftPlan,
    pub shift: ShiftOptions,
    pub sim: SimOptions,
    pub truth: Truth,
}

impl BenchmarkCase {
    pub fn in_true_roa(&self, x: &[f64]) -> bool {
        match self.truth {
            Truth::Hahn => x[0] * x[1] < 1.0,
            Truth::Simulate => in_true_roa(&self.sys, x, &self.sim),
        }
    }
}

pub fn load(name: &str) -> Result<BenchmarkCase, BenchError> {
    let identity = |n| DMatrix::<f64>::identity(n, n);
    let case = match name {
        "vdp" => {
            let sys = DynSystem::new(
                "vdp",
                vec![
                    poly(2, &[(&[0, 1], -1.0)]),
                    poly(2, &[(&[1, 0], 1.0), (&[0, 1], -5.0), (&[2, 1], 5.0)]),
                ],
                vec![(-3.0, 3.0); 2],
            )?;
            let v0 = init_lf(&sys, &identity(2))?;
            BenchmarkCase {
                name: "vdp",
                p0: ShapeFn::from_quadratic(&v0)?,
                v0,
                deg_v: 6,
                n_i: 30,
                deg_s2: None,
                base: Algorithm::A1,
                plan: ShiftPlan::from_centers(&[(&[&[1.0, 1.0], &[-1.0, -1.0]], MatrixSpec::default())]),
                shift: ShiftOptions::default(),
                sim: SimOptions {
                    t_max: 150.0,
                    ..SimOptions::default()
                },
                truth: Truth::Simulate,
                sys,
            }
        }
        "bistable" => {
            let sys = DynSystem::new(
                "bistable",
                vec![
                    poly(2, &[(&[3, 0], -4.0), (&[2, 0], 6.0), (&[1, 0], -2.0)]),
                    poly(2, &[(&[0, 1], -2.0)]),
                ],
                vec![(-3.0, 1.0), (-8.0, 8.0)],
            )?;
            let v0 = init_lf(&sys, &identity(2))?;
            BenchmarkCase {
                name: "bistable",
                p0: ShapeFn::from_quadratic(&v0.scale(0.8))?,
                v0,
                deg_v: 4,
                n_i: 30,
                deg_s2: None,
                base: Algorithm::A2,
                plan: ShiftPlan::from_centers(&[(&[&[-0.8, 0.0]], MatrixSpec::diag(&[1.0, 1.0 / 16.0]))]),
                shift: ShiftOptions {
                    branch_iters: 60,
                    ..ShiftOptions::default()
                },
                sim: SimOptions::default(),
                truth: Truth::Simulate,
                sys,
            }
        }
        "saddle" => {
            let sys = DynSystem::new(
                "saddle",
                vec![
                    poly(2, &[(&[1, 0], -50.0), (&[0, 1], -16.0), (&[1, 1], 13.8)]),
                    poly(2, &[(&[1, 0], 13.0), (&[0, 1], -9.0), (&[1, 1], 5.5)]),
                ],
                vec![(-25.0, 10.0), (-16.0, 20.0)],
            )?;
            let v0 = init_lf(&sys, &identity(2))?;
            let quarter = MatrixSpec::diag(&[0.25, 1.0]);
            BenchmarkCase {
                name: "saddle",
                p0: ShapeFn::from_quadratic(&v0)?,
                v0,
                deg_v: 4,
                n_i: 30,
                deg_s2: None,
                base: Algorithm::A1,
                plan: ShiftPlan {
                    rounds: vec![
                        ShiftRound {
                            centers: vec![vec![0.0, -4.0], vec![-7.5, 0.0]],
                            shapes: Some(vec![quarter.clone(), MatrixSpec::default()]),
                            parents: Some(vec![vec![], vec![]]),
                            ..ShiftRound::default()
                        },
                        ShiftRound {
                            centers: vec![vec![0.0, -11.0], vec![-18.0, 2.0], vec![-3.0, 8.0]],
                            shapes: Some(vec![quarter, MatrixSpec::default(), MatrixSpec::default()]),
                            parents: Some(vec![vec![1], vec![2], vec![2]]),
                            ..ShiftRound::default()
                        },
                    ],
                },
                shift: ShiftOptions::default(),
                sim: SimOptions::default(),
                truth: Truth::Simulate,
                sys,
            }
        }
        "hahn" => {
            let sys = DynSystem::new(
                "hahn",
                vec![
                    poly(2, &[(&[1, 0], -1.0), (&[2, 1], 2.0)]),
                    poly(2, &[(&[0, 1], -1.0)]),
                ],
                vec![(-10.0, 10.0); 2],
            )?;
            let v0 = init_lf(&sys, &identity(2))?;
            BenchmarkCase {
                name: "hahn",
                p0: ShapeFn::centered(DMatrix::from_row_slice(2, 2, &[14.47, 18.55, 18.55, 26.53]))?,
                v0,
                deg_v: 6,
                n_i: 30,
                deg_s2: Some(4),
                base: Algorithm::A1,
                plan: ShiftPlan {
                    rounds: vec![
                        ShiftRound {
                            centers: vec![vec![-4.0, 3.0], vec![4.0, -3.0]],
                            parents: Some(vec![vec![], vec![]]),
                            ..ShiftRound::default()
                        },
                        ShiftRound {
                            centers: vec![vec![-5.0, 5.0], vec![-6.0, 2.0], vec![5.0, -5.0], vec![6.0, -2.0]],
                            parents: Some(vec![vec![1], vec![1], vec![2], vec![2]]),
                            ..ShiftRound::default()
                        },
                    ],
                },
                shift: ShiftOptions::default(),
                sim: SimOptions::default(),
                truth: Truth::Hahn,
                sys,
            }
        }
        "taylor3d" => {
            let sys = DynSystem::new(
                "taylor3d",
                vec![
                    poly(3, &[(&[0, 1, 0], 1.0), (&[0, 0, 2], 1.0)]),
                    // x3 - x1^2 - x1 (x1 - x1^3 / 6)
                    poly(3, &[(&[0, 0, 1], 1.0), (&[2, 0, 0], -2.0), (&[4, 0, 0], 1.0 / 6.0)]),
                    // -x1 - 2 x2 - x3 + x2^3 + (2/3 x3^3 + 2/5 x3^5) / 10
                    poly(
                        3,
                        &[
                            (&[1, 0, 0], -1.0),
                            (&[0, 1, 0], -2.0),
                            (&[0, 0, 1], -1.0),
                            (&[0, 3, 0], 1.0),
                            (&[0, 0, 3], 1.0 / 15.0),
                            (&[0, 0, 5], 0.04),
                        ],
                    ),
                ],
                vec![(-2.0, 2.0); 3],
            )?;
            let v0 = init_lf(&sys, &identity(3))?;
            BenchmarkCase {
                name: "taylor3d",
                p0: ShapeFn::from_quadratic(&v0)?,
                v0,
                deg_v: 4,
                n_i: 30,
                deg_s2: None,
                base: Algorithm::A1,
                plan: ShiftPlan {
                    rounds: vec![ShiftRound {
                        centers: vec![
                            vec![0.8, 0.0, 0.0],
                            vec![-0.8, 0.0, 0.6],
                            vec![0.2, 0.0, -0.8],
                            vec![0.0, 0.0, 1.2],
                        ],
                        parents: Some(vec![vec![]; 4]),
                        ..ShiftRound::default()
                    }],
                },
                shift: ShiftOptions::default(),
                sim: SimOptions {
                    t_max: 100.0,
                    ..SimOptions::default()
                },
                truth: Truth::Simulate,
                sys,
            }
        }
        other => return Err(BenchError::Unknown(other.to_string())),
    };
    Ok(case)
}
