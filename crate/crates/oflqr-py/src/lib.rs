//! Python bindings. Matrices cross the boundary as lists of rows.
//!
//! The plain-Rust layer ([`substitute_data`], [`learn`], …) carries the logic; the
//! `#[pyclass]`/`#[pyfunction]` wrappers only convert arguments and errors.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use oflqr::expcli::config::Rows;
use oflqr::expcli::{cmd_run, random_system, Benchmark, ExperimentConfig};
use oflqr::lqr_learn::{evaluate_learned_cost, run_pi, run_vi};
use oflqr::lti_sim::simulate;
use oflqr::solver_core::{solve_dare, RankTol};
use oflqr::state_param::{build, project};
use oflqr::{
    CostWeights, Error, Gain, Learner, LtiSystem, NoiseSpec, ParamConfig, SubstituteData, Trajectory,
    ValueMatrix,
};
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

create_exception!(oflqr_py, NumericalError, PyRuntimeError, "A solver, rank or stability check failed.");

pub type Matrix = Vec<Vec<f64>>;

fn py_err(e: Error) -> PyErr {
    if e.is_numerical() {
        NumericalError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

pub fn to_matrix(rows: &Matrix, what: &str) -> oflqr::Result<DMatrix<f64>> {
    Rows(rows.clone()).to_matrix(what)
}

pub fn to_rows(m: &DMatrix<f64>) -> Matrix {
    Rows::from(m).0
}

/// Parameterizes a recorded trajectory; `roots` selects filtered mode, otherwise delayed with window `n`.
pub fn substitute_data(
    traj: &Trajectory,
    n: usize,
    roots: Option<&[f64]>,
    eta0_eps: Option<&[f64]>,
    do_project: bool,
) -> oflqr::Result<SubstituteData> {
    let cfg = match roots {
        Some(r) => {
            if r.len() != n {
                return Err(Error::InvalidArgument(format!("{} roots given for n = {n}", r.len())));
            }
            let eta0 = eta0_eps.map_or_else(|| DVector::zeros(n), DVector::from_column_slice);
            ParamConfig::filtered(r, eta0)
        }
        None => ParamConfig::delayed(n),
    };
    cfg.validate()?;
    let raw = build(traj, &cfg)?;
    if do_project {
        project(&raw, n, cfg.rank_tol)
    } else {
        SubstituteData::unprojected(&raw, RankTol::Auto)
    }
}

#[derive(Clone, Debug)]
pub struct Learned {
    pub gain: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    pub p: Option<DMatrix<f64>>,
    pub converged: bool,
    pub residuals: Vec<f64>,
    pub cost: f64,
    pub data_radius: f64,
}

pub enum Algorithm {
    Pi { k0: Option<DMatrix<f64>> },
    Vi { p0_scale: f64 },
}

pub fn learn(
    data: &SubstituteData,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    alg: Algorithm,
    eps: f64,
    max_iter: usize,
) -> oflqr::Result<Learned> {
    let learner = Learner::new(data, CostWeights::new(q.clone(), r.clone())?)?;
    let out = match alg {
        Algorithm::Pi { k0 } => {
            let k0 = k0.map_or_else(|| Gain::zeros(data.m(), data.n_v), Gain);
            run_pi(&learner, &k0, eps, max_iter)?
        }
        Algorithm::Vi { p0_scale } => {
            let p0 = ValueMatrix(DMatrix::identity(data.n_v, data.n_v) * p0_scale);
            run_vi(&learner, &p0, eps, max_iter)?
        }
    };
    Ok(Learned {
        cost: evaluate_learned_cost(&out.k_star, &out.theta, &data.v_initial()),
        data_radius: learner.closed_loop_radius(&out.k_star),
        residuals: out.residuals(),
        gain: out.k_star.0,
        theta: out.theta.theta,
        p: out.p.map(|p| p.0),
        converged: out.converged,
    })
}

/// Runs a JSON experiment config, writes its artifacts to `out` and returns the report as JSON.
pub fn run_experiment_json(config: &str, out: &Path) -> oflqr::Result<String> {
    let cfg = ExperimentConfig::from_json(config)?;
    let report = cmd_run(&cfg, out)?;
    Ok(serde_json::to_string_pretty(&report)?)
}

#[pyclass(name = "System", module = "oflqr_py", frozen)]
pub struct PySystem {
    inner: LtiSystem,
}

#[pymethods]
impl PySystem {
    #[new]
    fn new(a: Matrix, b: Matrix, c: Matrix) -> PyResult<Self> {
        let sys = LtiSystem::new(to_matrix(&a, "A").map_err(py_err)?, to_matrix(&b, "B").map_err(py_err)?, to_matrix(&c, "C").map_err(py_err)?);
        Ok(PySystem { inner: sys.map_err(py_err)? })
    }

    #[staticmethod]
    fn benchmark(name: &str) -> PyResult<Self> {
        Ok(PySystem { inner: Benchmark::parse(name).map_err(py_err)?.system() })
    }

    #[staticmethod]
    fn random(n: usize, m: usize, p: usize, seed: u32) -> PyResult<Self> {
        Ok(PySystem { inner: random_system(n, m, p, seed).map_err(py_err)? })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }
    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }
    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }
    #[getter]
    fn a(&self) -> Matrix {
        to_rows(&self.inner.a)
    }
    #[getter]
    fn b(&self) -> Matrix {
        to_rows(&self.inner.b)
    }
    #[getter]
    fn c(&self) -> Matrix {
        to_rows(&self.inner.c)
    }

    /// Simulates from `x0` under the m×T input `u`; bounded uniform noise when `w_max` is given.
    #[pyo3(signature = (x0, u, w_max=None, e_max=None, seed=0))]
    fn simulate(&self, x0: Vec<f64>, u: Matrix, w_max: Option<f64>, e_max: Option<f64>, seed: u32) -> PyResult<PyTrajectory> {
        let u = to_matrix(&u, "u").map_err(py_err)?;
        let noise = w_max.map(|w| NoiseSpec { w_max: w, e_max: e_max.unwrap_or(w), seed });
        let traj = simulate(&self.inner, &DVector::from_vec(x0), &u, noise.as_ref()).map_err(py_err)?;
        Ok(PyTrajectory { inner: traj })
    }

    fn __repr__(&self) -> String {
        format!("System(n={}, m={}, p={})", self.inner.n(), self.inner.m(), self.inner.p())
    }
}

#[pyclass(name = "Trajectory", module = "oflqr_py", frozen)]
pub struct PyTrajectory {
    inner: Trajectory,
}

#[pymethods]
impl PyTrajectory {
    #[new]
    #[pyo3(signature = (u, y, t0=0))]
    fn new(u: Matrix, y: Matrix, t0: i64) -> PyResult<Self> {
        let traj = Trajectory::new(to_matrix(&u, "u").map_err(py_err)?, to_matrix(&y, "y").map_err(py_err)?, t0);
        Ok(PyTrajectory { inner: traj.map_err(py_err)? })
    }
    #[getter]
    fn u(&self) -> Matrix {
        to_rows(&self.inner.u)
    }
    #[getter]
    fn y(&self) -> Matrix {
        to_rows(&self.inner.y)
    }
    #[getter]
    fn x(&self) -> Option<Matrix> {
        self.inner.x.as_ref().map(to_rows)
    }
    #[getter]
    fn t0(&self) -> i64 {
        self.inner.t0
    }
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Substitute-state data: filtered with observer `roots`, or delayed with window `n` when omitted.
    #[pyo3(signature = (n, roots=None, eta0_eps=None, project=true))]
    fn substitute_data(&self, n: usize, roots: Option<Vec<f64>>, eta0_eps: Option<Vec<f64>>, project: bool) -> PyResult<PyData> {
        let data = substitute_data(&self.inner, n, roots.as_deref(), eta0_eps.as_deref(), project).map_err(py_err)?;
        Ok(PyData { inner: data })
    }
}

#[pyclass(name = "SubstituteData", module = "oflqr_py", frozen)]
pub struct PyData {
    inner: SubstituteData,
}

#[pymethods]
impl PyData {
    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(PyData { inner: SubstituteData::from_json(s).map_err(py_err)? })
    }
    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }
    #[getter]
    fn n_v(&self) -> usize {
        self.inner.n_v
    }
    #[getter]
    fn n_zeta(&self) -> usize {
        self.inner.n_zeta
    }
    #[getter]
    fn samples(&self) -> usize {
        self.inner.samples()
    }
    #[getter]
    fn rows(&self) -> Vec<usize> {
        self.inner.rows.clone()
    }
    #[getter]
    fn v0(&self) -> Matrix {
        to_rows(&self.inner.v0)
    }
    #[getter]
    fn v1(&self) -> Matrix {
        to_rows(&self.inner.v1)
    }
    #[getter]
    fn u0(&self) -> Matrix {
        to_rows(&self.inner.u0)
    }
    #[getter]
    fn v_initial(&self) -> Vec<f64> {
        self.inner.v_initial().iter().copied().collect()
    }
}

#[pyclass(name = "LearnResult", module = "oflqr_py", frozen, get_all)]
pub struct PyLearned {
    gain: Matrix,
    theta: Matrix,
    p: Option<Matrix>,
    converged: bool,
    residuals: Vec<f64>,
    /// Learned cost from the first data column.
    cost: f64,
    data_radius: f64,
}

#[pymethods]
impl PyLearned {
    #[getter]
    fn iterations(&self) -> usize {
        self.residuals.len()
    }
    fn __repr__(&self) -> String {
        format!("LearnResult(converged={}, iterations={}, cost={:.6e})", self.converged, self.residuals.len(), self.cost)
    }
}

impl From<Learned> for PyLearned {
    fn from(l: Learned) -> Self {
        PyLearned {
            gain: to_rows(&l.gain),
            theta: to_rows(&l.theta),
            p: l.p.as_ref().map(to_rows),
            converged: l.converged,
            residuals: l.residuals,
            cost: l.cost,
            data_radius: l.data_radius,
        }
    }
}

/// Policy iteration on substitute data with output weight `q` and input weight `r`.
#[pyfunction]
#[pyo3(signature = (data, q, r, k0=None, eps=1e-9, max_iter=50))]
fn learn_pi(data: &PyData, q: Matrix, r: Matrix, k0: Option<Matrix>, eps: f64, max_iter: usize) -> PyResult<PyLearned> {
    let k0 = k0.map(|k| to_matrix(&k, "k0")).transpose().map_err(py_err)?;
    let (q, r) = (to_matrix(&q, "q").map_err(py_err)?, to_matrix(&r, "r").map_err(py_err)?);
    learn(&data.inner, &q, &r, Algorithm::Pi { k0 }, eps, max_iter).map(Into::into).map_err(py_err)
}

/// Value iteration from P0 = p0_scale·I.
#[pyfunction]
#[pyo3(signature = (data, q, r, p0_scale=0.0, eps=1e-9, max_iter=5000))]
fn learn_vi(data: &PyData, q: Matrix, r: Matrix, p0_scale: f64, eps: f64, max_iter: usize) -> PyResult<PyLearned> {
    let (q, r) = (to_matrix(&q, "q").map_err(py_err)?, to_matrix(&r, "r").map_err(py_err)?);
    learn(&data.inner, &q, &r, Algorithm::Vi { p0_scale }, eps, max_iter).map(Into::into).map_err(py_err)
}

/// Model-based Riccati solution; returns (P, K) with u = Kx.
#[pyfunction]
#[pyo3(signature = (a, b, qx, r, tol=1e-12, max_iter=100_000))]
fn dare(a: Matrix, b: Matrix, qx: Matrix, r: Matrix, tol: f64, max_iter: usize) -> PyResult<(Matrix, Matrix)> {
    let m = |x: &Matrix, w| to_matrix(x, w).map_err(py_err);
    let sol = solve_dare(&m(&a, "A")?, &m(&b, "B")?, &m(&qx, "Qx")?, &m(&r, "R")?, tol, max_iter).map_err(py_err)?;
    Ok((to_rows(&sol.p), to_rows(&sol.k)))
}

/// Runs one experiment from a JSON config; artifacts go to `out_dir`, the report comes back as JSON.
#[pyfunction]
fn run_experiment(py: Python<'_>, config: String, out_dir: String) -> PyResult<String> {
    py.detach(move || run_experiment_json(&config, Path::new(&out_dir))).map_err(py_err)
}

/// Fully specified config for a named benchmark, as JSON.
#[pyfunction]
fn benchmark_config(name: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::benchmark(Benchmark::parse(name).map_err(py_err)?);
    let setup = cfg.resolve().map_err(py_err)?;
    setup.echo.to_json().map_err(py_err)
}

#[pyfunction]
fn benchmarks() -> Vec<&'static str> {
    Benchmark::ALL.iter().map(|b| b.name()).collect()
}

#[pymodule]
fn oflqr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySystem>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyData>()?;
    m.add_class::<PyLearned>()?;
    m.add_function(wrap_pyfunction!(learn_pi, m)?)?;
    m.add_function(wrap_pyfunction!(learn_vi, m)?)?;
    m.add_function(wrap_pyfunction!(dare, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark_config, m)?)?;
    m.add_function(wrap_pyfunction!(benchmarks, m)?)?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    Ok(())
}
