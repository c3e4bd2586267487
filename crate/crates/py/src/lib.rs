//! Python module `roa`.

use nalgebra::DMatrix;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use roa_core::bench;
use roa_core::cli::{self, CertFile, CliError, RunConfig};
use roa_core::poly::{self, Monomial};
use roa_core::rcomp;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn cli_err(e: CliError) -> PyErr {
    match e {
        CliError::Config(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(format!("exit {}: {e}", e.exit_code())),
    }
}

/// Sparse polynomial in `dim` variables.
#[pyclass(frozen, from_py_object)]
#[derive(Clone)]
pub struct Polynomial {
    inner: poly::Polynomial,
}

#[pymethods]
impl Polynomial {
    /// `terms` is a list of `(exponents, coefficient)` pairs.
    #[new]
    fn new(dim: usize, terms: Vec<(Vec<u32>, f64)>) -> PyResult<Self> {
        if let Some((e, _)) = terms.iter().find(|(e, _)| e.len() != dim) {
            return Err(value_err(format!("exponent {e:?} does not have length {dim}")));
        }
        Ok(Polynomial {
            inner: poly::Polynomial::from_terms(dim, terms.into_iter().map(|(e, c)| (Monomial::new(e), c))),
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn degree(&self) -> i32 {
        self.inner.degree()
    }

    fn eval(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.eval(&x).map_err(value_err)
    }

    fn coeff(&self, exponents: Vec<u32>) -> f64 {
        self.inner.coeff(&Monomial::new(exponents))
    }

    fn terms(&self) -> Vec<(Vec<u32>, f64)> {
        self.inner.terms().map(|(m, c)| (m.exponents().to_vec(), c)).collect()
    }

    /// Lie derivative along the vector field `f`.
    fn lie_derivative(&self, f: Vec<Polynomial>) -> PyResult<Polynomial> {
        let f: Vec<_> = f.into_iter().map(|p| p.inner).collect();
        Ok(Polynomial {
            inner: poly::lie_derivative(&self.inner, &f).map_err(value_err)?,
        })
    }

    fn __add__(&self, other: &Polynomial) -> PyResult<Polynomial> {
        Ok(Polynomial {
            inner: self.inner.try_add(&other.inner).map_err(value_err)?,
        })
    }

    fn __sub__(&self, other: &Polynomial) -> PyResult<Polynomial> {
        Ok(Polynomial {
            inner: self.inner.try_sub(&other.inner).map_err(value_err)?,
        })
    }

    fn __mul__(&self, other: &Polynomial) -> PyResult<Polynomial> {
        Ok(Polynomial {
            inner: self.inner.try_mul(&other.inner).map_err(value_err)?,
        })
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Polynomial({})", self.inner)
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(value_err("matrix must be square"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// `(x - center)^T N (x - center)` expanded.
#[pyfunction]
fn affine_shift_expand(n: Vec<Vec<f64>>, center: Vec<f64>) -> PyResult<Polynomial> {
    Ok(Polynomial {
        inner: poly::affine_shift_expand(&matrix(n)?, &center).map_err(value_err)?,
    })
}

/// Initial Lyapunov function of a named benchmark.
#[pyfunction]
fn benchmark_v0(name: &str) -> PyResult<Polynomial> {
    let case = bench::load(name).map_err(value_err)?;
    Ok(Polynomial { inner: case.v0 })
}

/// Vector field of a named benchmark.
#[pyfunction]
fn benchmark_field(name: &str) -> PyResult<Vec<Polynomial>> {
    let case = bench::load(name).map_err(value_err)?;
    Ok(case.sys.f.into_iter().map(|inner| Polynomial { inner }).collect())
}

#[pyfunction]
fn r_or(r1: f64, r2: f64, tau: f64) -> f64 {
    rcomp::r_or(r1, r2, tau)
}

#[pyfunction]
fn r_and(r1: f64, r2: f64, tau: f64) -> f64 {
    rcomp::r_and(r1, r2, tau)
}

/// Outcome of `run`.
#[pyclass(frozen, get_all)]
pub struct RunResult {
    exit_code: i32,
    report: String,
    certs_json: String,
    /// `(name, V, gates passed)` per certified set.
    sets: Vec<(String, Polynomial, bool)>,
    union_area: f64,
    union_stderr: f64,
}

#[pymethods]
impl RunResult {
    fn __repr__(&self) -> String {
        format!("RunResult(exit_code={}, sets={}, union_area={:.4})", self.exit_code, self.sets.len(), self.union_area)
    }
}

/// Runs a JSON configuration in memory. Writes no files.
#[pyfunction]
fn run(py: Python<'_>, config_json: &str) -> PyResult<RunResult> {
    let cfg = RunConfig::from_json(config_json).map_err(cli_err)?;
    let out = py.detach(|| cli::resolve(&cfg).and_then(cli::execute)).map_err(cli_err)?;
    let certs_json = serde_json::to_string(&CertFile::from_run(&out)).map_err(value_err)?;
    Ok(RunResult {
        exit_code: out.exit_code(),
        report: out.report.clone(),
        certs_json,
        sets: out
            .sets
            .iter()
            .zip(&out.gates)
            .map(|(s, g)| (s.name(), Polynomial { inner: s.cert.v.clone() }, g.passed()))
            .collect(),
        union_area: out.union_measure.measure,
        union_stderr: out.union_measure.stderr,
    })
}

/// Re-checks every certificate in a certs.json document.
#[pyfunction]
fn validate_certs(py: Python<'_>, certs_json: &str) -> PyResult<Vec<(String, bool)>> {
    let file: CertFile = serde_json::from_str(certs_json).map_err(value_err)?;
    py.detach(|| cli::validate_certs(&file)).map_err(cli_err)
}

#[pymodule]
fn roa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Polynomial>()?;
    m.add_class::<RunResult>()?;
    m.add_function(wrap_pyfunction!(affine_shift_expand, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark_v0, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark_field, m)?)?;
    m.add_function(wrap_pyfunction!(r_or, m)?)?;
    m.add_function(wrap_pyfunction!(r_and, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(validate_certs, m)?)?;
    Ok(())
}
