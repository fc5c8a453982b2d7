//! Python bindings: configuration, scenarios, the transport solver and the
//! validation tables.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use trbf_uot::admm::{self, IterationReport, RunOutcome, UotProblem};
use trbf_uot::cli;
use trbf_uot::config::{self, RunConfig};
use trbf_uot::geometry::PointCloud;
use trbf_uot::scenarios;

fn runtime(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn value(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows(field: &trbf_uot::Field) -> Vec<Vec<f64>> {
    (0..field.n_times()).map(|i| field.row(i).to_vec()).collect()
}

/// Parsed run configuration.
#[pyclass(name = "RunConfig", module = "trbf_uot", frozen)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Parse `key = value` text; unknown keys and out-of-range values raise
    /// `ValueError`.
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self { inner: config::parse_config(text).map_err(value)? })
    }

    #[getter]
    fn scenario(&self) -> String {
        self.inner.scenario.clone()
    }
    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta
    }
    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }
    #[getter]
    fn eta(&self) -> f64 {
        self.inner.eta
    }
    #[getter]
    fn n_t(&self) -> usize {
        self.inner.n_t
    }
    #[getter]
    fn target_count(&self) -> usize {
        self.inner.target_count
    }
    #[getter]
    fn stencil_size(&self) -> usize {
        self.inner.stencil_size
    }
    #[getter]
    fn tol(&self) -> f64 {
        self.inner.tol
    }
    #[getter]
    fn max_iters(&self) -> usize {
        self.inner.max_iters
    }

    /// Fully resolved configuration as JSON.
    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(runtime)
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(scenario={:?}, beta={}, alpha={}, eta={}, n_t={})",
            self.inner.scenario, self.inner.beta, self.inner.alpha, self.inner.eta, self.inner.n_t
        )
    }
}

/// Sample points with unit normals and quadrature weights.
#[pyclass(name = "PointCloud", module = "trbf_uot", frozen)]
struct PyPointCloud {
    inner: PointCloud,
}

#[pymethods]
impl PyPointCloud {
    /// Cloud of a named scenario.
    #[staticmethod]
    #[pyo3(signature = (name, target_count = 400, seed = 1))]
    fn scenario(name: &str, target_count: usize, seed: u64) -> PyResult<Self> {
        let kind = scenarios::ScenarioKind::parse(name).map_err(value)?;
        let cloud = match kind {
            scenarios::ScenarioKind::CirclePoisson => scenarios::circle_cloud(target_count).map_err(runtime)?,
            kind => {
                let opts = scenarios::ScenarioOptions { target_count, seed, ..Default::default() };
                scenarios::build_transport_scenario(&kind, &opts).map_err(runtime)?.cloud
            }
        };
        Ok(Self { inner: cloud })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn points(&self) -> Vec<[f64; 3]> {
        self.inner.points().iter().map(|p| [p.x, p.y, p.z]).collect()
    }

    #[getter]
    fn normals(&self) -> Vec<[f64; 3]> {
        self.inner.normals().iter().map(|p| [p.x, p.y, p.z]).collect()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }
}

fn report_dict<'py>(py: Python<'py>, r: &IterationReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("iter", r.iter)?;
    d.set_item("primal", r.primal)?;
    d.set_item("dual", r.dual)?;
    d.set_item("continuity", r.continuity)?;
    d.set_item("wfr", r.wfr)?;
    d.set_item("quintic", r.quintic)?;
    d.set_item("min_rho", r.min_rho)?;
    d.set_item("infeasible", r.infeasible)?;
    Ok(d)
}

/// Transport problem built from a configuration.
#[pyclass(name = "Problem", module = "trbf_uot", frozen)]
struct PyProblem {
    inner: UotProblem,
    config: RunConfig,
}

#[pymethods]
impl PyProblem {
    #[new]
    fn new(config: &PyRunConfig) -> PyResult<Self> {
        let inner = cli::build_problem(&config.inner).map_err(runtime)?;
        Ok(Self { inner, config: config.inner.clone() })
    }

    #[getter]
    fn n_nodes(&self) -> usize {
        self.inner.cloud.len()
    }

    #[getter]
    fn n_times(&self) -> usize {
        self.inner.grid().len()
    }

    #[getter]
    fn rho0(&self) -> Vec<f64> {
        self.inner.rho0.clone()
    }

    #[getter]
    fn rho_t(&self) -> Vec<f64> {
        self.inner.rho_t.clone()
    }

    /// Run ADMM; `max_iters` overrides the configured limit.
    #[pyo3(signature = (max_iters = None))]
    fn run(&self, py: Python<'_>, max_iters: Option<usize>) -> PyResult<PyOutcome> {
        let mut cfg = self.config.admm();
        if let Some(m) = max_iters {
            cfg.max_iters = m;
        }
        let outcome = py.detach(|| admm::run(&self.inner, &cfg)).map_err(runtime)?;
        let source = admm::total_source(&outcome.state, &self.inner);
        let mass = admm::mass_profile(&outcome.state, &self.inner);
        Ok(PyOutcome { inner: outcome, source, mass })
    }
}

/// Result of an ADMM run.
#[pyclass(name = "Outcome", module = "trbf_uot", frozen)]
struct PyOutcome {
    inner: RunOutcome,
    source: f64,
    mass: Vec<f64>,
}

#[pymethods]
impl PyOutcome {
    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.reports.len()
    }

    #[getter]
    fn cost(&self) -> f64 {
        self.inner.reports.last().map_or(f64::NAN, |r| r.wfr)
    }

    #[getter]
    fn total_source(&self) -> f64 {
        self.source
    }

    #[getter]
    fn mass_profile(&self) -> Vec<f64> {
        self.mass.clone()
    }

    /// Density, one row per time node.
    #[getter]
    fn rho(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.state.rho_bar)
    }

    #[getter]
    fn source(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.state.f_bar)
    }

    /// Momentum components `(mx, my, mz)`, each one row per time node.
    #[getter]
    fn momentum(&self) -> [Vec<Vec<f64>>; 3] {
        [rows(&self.inner.state.m_bar[0]), rows(&self.inner.state.m_bar[1]), rows(&self.inner.state.m_bar[2])]
    }

    fn reports<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner.reports.iter().map(|r| report_dict(py, r)).collect()
    }
}

/// Poisson refinement rows as dicts with `inv_dt, inv_h, l1, l2`.
#[pyfunction]
#[pyo3(signature = (text = ""))]
fn poisson_table<'py>(py: Python<'py>, text: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = config::parse_config_with_scenario(text, "circle-poisson").map_err(value)?;
    let table = py.detach(|| cli::poisson_table(&cfg)).map_err(runtime)?;
    table
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("inv_dt", r.inv_dt)?;
            d.set_item("inv_h", r.inv_h)?;
            d.set_item("l1", r.l1)?;
            d.set_item("l2", r.l2)?;
            Ok(d)
        })
        .collect()
}

/// 1D transport rows as dicts with `inv_dt, inv_h, cost, oracle, error,
/// iterations, converged`.
#[pyfunction]
#[pyo3(signature = (text = ""))]
fn ot1d_table<'py>(py: Python<'py>, text: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = config::parse_config_with_scenario(text, "circle-ot1d").map_err(value)?;
    let table = py.detach(|| cli::ot1d_table(&cfg)).map_err(runtime)?;
    table
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("inv_dt", r.inv_dt)?;
            d.set_item("inv_h", r.inv_h)?;
            d.set_item("cost", r.cost)?;
            d.set_item("oracle", r.oracle)?;
            d.set_item("error", r.error())?;
            d.set_item("iterations", r.iterations)?;
            d.set_item("converged", r.converged)?;
            Ok(d)
        })
        .collect()
}

/// Stencil audit of the configured scenario as a JSON string.
#[pyfunction]
#[pyo3(signature = (text = ""))]
fn stencil_audit(text: &str) -> PyResult<String> {
    let cfg = config::parse_config(text).map_err(value)?;
    let audit = cli::stencil_audit(&cfg).map_err(runtime)?;
    serde_json::to_string(&audit).map_err(runtime)
}

/// Pointwise step-1 root: returns `(rho, scaled residual)`.
#[pyfunction]
#[pyo3(signature = (a, b2, c2, alpha, eta))]
fn solve_quintic(a: f64, b2: f64, c2: f64, alpha: f64, eta: f64) -> PyResult<(f64, f64)> {
    admm::solve_quintic(a, b2, c2, alpha, eta).map_err(runtime)
}

/// Exact cost of the 1D transport problem on the circle.
#[pyfunction]
fn ot1d_exact_cost() -> f64 {
    scenarios::ot_1d_exact_cost()
}

#[pymodule]
#[pyo3(name = "trbf_uot")]
fn trbf_uot_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyProblem>()?;
    m.add_class::<PyOutcome>()?;
    m.add_function(wrap_pyfunction!(poisson_table, m)?)?;
    m.add_function(wrap_pyfunction!(ot1d_table, m)?)?;
    m.add_function(wrap_pyfunction!(stencil_audit, m)?)?;
    m.add_function(wrap_pyfunction!(solve_quintic, m)?)?;
    m.add_function(wrap_pyfunction!(ot1d_exact_cost, m)?)?;
    Ok(())
}
