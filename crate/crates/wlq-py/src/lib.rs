//! Python bindings for the weighted LQ control library.
//!
//! Exposes the problem model, the stability and Riccati solvers, and the
//! Monte Carlo estimators as a `wlq_py` extension module. Matrices cross the
//! boundary as row-major nested lists.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use nalgebra::{DMatrix, DVector};
use wlq::mc::{self, ControlLaw, SimConfig};
use wlq::model::{self, ProblemSpec, ValidationMode};
use wlq::stability;
use wlq::synthesis::{self, SynthesisResult};
use wlq::transform;
use wlq::weight::{self, WeightParams};
use wlq::WlqError;

fn to_py_err(err: WlqError) -> PyErr {
    match err {
        WlqError::DimensionMismatch { .. }
        | WlqError::NotSymmetric { .. }
        | WlqError::NotPositiveDefinite { .. }
        | WlqError::NonIntegrableSignal { .. }
        | WlqError::UnsupportedSignalKind(_)
        | WlqError::NonpositiveE(_)
        | WlqError::ValidationFailed { .. }
        | WlqError::ProblemFile(_)
        | WlqError::GridMismatch(_)
        | WlqError::NotHomogeneous(_) => PyValueError::new_err(err.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn matrix_from_rows(rows_in: &[Vec<f64>], nrows: usize, ncols: usize) -> PyResult<DMatrix<f64>> {
    if rows_in.len() != nrows || rows_in.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err(format!(
            "expected a {nrows} x {ncols} row-major nested list"
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows_in[i][j]))
}

/// A validated weighted LQ problem.
#[pyclass(name = "Problem")]
struct PyProblem {
    spec: ProblemSpec,
}

#[pymethods]
impl PyProblem {
    /// Parse a problem from TOML text (same schema as the CLI problem file).
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyProblem {
            spec: model::parse_problem(text).map_err(to_py_err)?,
        })
    }

    /// Read a problem file from disk.
    #[staticmethod]
    fn from_file(path: &str) -> PyResult<Self> {
        Ok(PyProblem {
            spec: model::load_problem(std::path::Path::new(path)).map_err(to_py_err)?,
        })
    }

    /// Scalar problem with zero signals.
    #[staticmethod]
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (a, b, c, d, e, f, q, s, r, x0=1.0))]
    fn scalar(
        a: f64,
        b: f64,
        c: f64,
        d: f64,
        e: f64,
        f: f64,
        q: f64,
        s: f64,
        r: f64,
        x0: f64,
    ) -> Self {
        PyProblem {
            spec: ProblemSpec::scalar(a, b, c, d, e, f, q, s, r, x0),
        }
    }

    #[getter]
    fn n(&self) -> usize {
        self.spec.n
    }

    #[getter]
    fn m(&self) -> usize {
        self.spec.m
    }

    /// Hypothesis checks as a list of (name, passed, detail) tuples.
    #[pyo3(signature = (strict=true))]
    fn validate(&self, strict: bool) -> Vec<(String, bool, String)> {
        let mode = if strict {
            ValidationMode::Strict
        } else {
            ValidationMode::Permissive
        };
        let mut report = model::validate(&self.spec, mode);
        stability::augment_validation(&mut report, &self.spec, !strict);
        report
            .checks
            .into_iter()
            .map(|c| (c.name, c.passed, c.detail))
            .collect()
    }

    /// Transformed classical system matrices {at, bt, ct, dt}.
    fn transform<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let ts = transform::to_classical(&self.spec);
        let out = PyDict::new(py);
        out.set_item("at", rows(&ts.at))?;
        out.set_item("bt", rows(&ts.bt))?;
        out.set_item("ct", rows(&ts.ct))?;
        out.set_item("dt", rows(&ts.dt))?;
        Ok(out)
    }

    /// Weighted L2-stability of [A, C], or of the closed loop when a gain
    /// (row-major nested list, m x n) is supplied.
    #[pyo3(signature = (theta=None))]
    fn stability<'py>(
        &self,
        py: Python<'py>,
        theta: Option<Vec<Vec<f64>>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let verdict = match theta {
            Some(rows_in) => {
                let th = matrix_from_rows(&rows_in, self.spec.m, self.spec.n)?;
                stability::is_stabilizer(&th, &self.spec)
            }
            None => {
                stability::is_weighted_stable(&self.spec.a, &self.spec.c, self.spec.e, self.spec.f)
            }
        };
        let out = PyDict::new(py);
        out.set_item("stable", verdict.stable)?;
        out.set_item("sufficient_holds", verdict.sufficient_holds)?;
        out.set_item("residual", verdict.certificate)?;
        out.set_item("min_eig_p", verdict.min_eig_p)?;
        out.set_item("p", verdict.p.as_ref().map(rows))?;
        out.set_item("reason", verdict.reason)?;
        Ok(out)
    }

    /// Solve the Riccati equation and the affine terms.
    #[pyo3(signature = (t_max=8.0, grid_points=128))]
    fn synthesize(&self, t_max: f64, grid_points: usize) -> PyResult<PySynthesis> {
        let pts = grid_points.max(1);
        let grid: Vec<f64> = (0..=pts)
            .map(|k| self.spec.t0 + t_max * k as f64 / pts as f64)
            .collect();
        let result = synthesis::synthesize(&self.spec, &grid).map_err(to_py_err)?;
        Ok(PySynthesis { result })
    }

    /// Monte Carlo estimate of the recursive cost under the given control
    /// ("zero" or "closed-loop").
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (control="closed-loop", paths=2000, dt=1e-3, t_max=8.0, seed=0, antithetic=false))]
    fn estimate_cost<'py>(
        &self,
        py: Python<'py>,
        control: &str,
        paths: usize,
        dt: f64,
        t_max: f64,
        seed: u64,
        antithetic: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let cfg = SimConfig {
            t_max,
            dt,
            n_paths: paths,
            seed,
            antithetic,
        };
        let report = match control {
            "zero" => {
                let decay = stability::is_weighted_stable(
                    &self.spec.a,
                    &self.spec.c,
                    self.spec.e,
                    self.spec.f,
                )
                .decay_rate();
                mc::estimate_cost(&self.spec, &ControlLaw::Zero, &cfg, decay)
            }
            "closed-loop" => {
                let grid: Vec<f64> = (0..=128)
                    .map(|k| self.spec.t0 + t_max * k as f64 / 128.0)
                    .collect();
                let syn = synthesis::synthesize(&self.spec, &grid).map_err(to_py_err)?;
                let decay = stability::is_stabilizer(&syn.theta_bar, &self.spec).decay_rate();
                let vb = |s: f64| syn.vbar.eval(s);
                mc::estimate_cost(
                    &self.spec,
                    &ControlLaw::Feedback {
                        theta: &syn.theta_bar,
                        offset: Some(&vb),
                    },
                    &cfg,
                    decay,
                )
            }
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown control '{other}' (use \"zero\" or \"closed-loop\")"
                )))
            }
        }
        .map_err(to_py_err)?;
        let out = PyDict::new(py);
        out.set_item("cost_mean", report.cost_mean)?;
        out.set_item("cost_se", report.cost_se)?;
        out.set_item("tail_bound", report.tail_bound)?;
        out.set_item("weighted_state_norm", report.weighted_state_norm)?;
        out.set_item("n_paths", report.paths_summary.n_paths)?;
        Ok(out)
    }

    /// Stationarity residual of a synthesis along closed-loop paths.
    #[pyo3(signature = (syn, paths=16, dt=1e-3, t_max=8.0, seed=0))]
    fn stationarity_residual<'py>(
        &self,
        py: Python<'py>,
        syn: &PySynthesis,
        paths: usize,
        dt: f64,
        t_max: f64,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let cfg = SimConfig {
            t_max,
            dt,
            n_paths: paths,
            seed,
            antithetic: false,
        };
        let report = mc::stationarity_residual(&self.spec, &syn.result, &cfg).map_err(to_py_err)?;
        let out = PyDict::new(py);
        out.set_item("rms", report.stationarity_rms)?;
        out.set_item("scale", report.stationarity_scale)?;
        out.set_item("cost_mean", report.cost_mean)?;
        Ok(out)
    }

    /// Reduce deterministic forcing into modified cost signals; returns the
    /// control-independent offset phi and the superposition check.
    #[pyo3(signature = (paths=256, dt=1e-3, t_max=20.0, seed=0))]
    fn reduce<'py>(
        &self,
        py: Python<'py>,
        paths: usize,
        dt: f64,
        t_max: f64,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let cfg = SimConfig {
            t_max,
            dt,
            n_paths: paths,
            seed,
            antithetic: false,
        };
        let rep = mc::reduce_nonhomogeneous(&self.spec, &cfg, 0).map_err(to_py_err)?;
        let out = PyDict::new(py);
        out.set_item("phi_mean", rep.phi_mean)?;
        out.set_item("phi_se", rep.phi_se)?;
        out.set_item("superposition_max_err", rep.superposition_max_err)?;
        Ok(out)
    }
}

/// Riccati solution with the affine terms.
#[pyclass(name = "Synthesis")]
struct PySynthesis {
    result: SynthesisResult,
}

#[pymethods]
impl PySynthesis {
    #[getter]
    fn p(&self) -> Vec<Vec<f64>> {
        rows(&self.result.p)
    }

    #[getter]
    fn theta(&self) -> Vec<Vec<f64>> {
        rows(&self.result.theta_bar)
    }

    #[getter]
    fn residual(&self) -> f64 {
        self.result.residual
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.result.iterations
    }

    /// Affine adjoint at time s.
    fn eta(&self, s: f64) -> Vec<f64> {
        self.result.eta.eval(s).iter().cloned().collect()
    }

    /// Affine control offset at time s.
    fn vbar(&self, s: f64) -> Vec<f64> {
        self.result.vbar.eval(s).iter().cloned().collect()
    }

    /// Predicted optimal cost of the homogeneous problem at state x.
    fn value(&self, problem: &PyProblem, x: Vec<f64>) -> PyResult<f64> {
        synthesis::value_homogeneous(&problem.spec, &self.result.p, &DVector::from_vec(x))
            .map_err(to_py_err)
    }
}

/// Weight ratio mu(s)/mu(t) along a Brownian increment.
#[pyfunction]
fn mu_exact(s: f64, t: f64, w_increment: f64, e: f64, f: f64) -> f64 {
    weight::mu_exact(s, t, w_increment, &WeightParams::new(e, f))
}

/// Mean weight ratio exp(-E (s - t)).
#[pyfunction]
fn mu_mean(s: f64, t: f64, e: f64, f: f64) -> f64 {
    weight::mu_mean(s, t, &WeightParams::new(e, f))
}

/// Exponent condition p2 > 1 + F^2 / (2E).
#[pyfunction]
fn check_exponent_condition(p2: f64, e: f64, f: f64) -> PyResult<bool> {
    weight::check_exponent_condition(p2, &WeightParams::new(e, f)).map_err(to_py_err)
}

#[pymodule]
fn wlq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProblem>()?;
    m.add_class::<PySynthesis>()?;
    m.add_function(wrap_pyfunction!(mu_exact, m)?)?;
    m.add_function(wrap_pyfunction!(mu_mean, m)?)?;
    m.add_function(wrap_pyfunction!(check_exponent_condition, m)?)?;
    Ok(())
}
