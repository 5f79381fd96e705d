//! Python bindings: `import mdp_stability`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use mdp_stability::bisim::{cross_bisim_metric, hausdorff_of, BisimConfig};
use mdp_stability::mdp::{induce_chain, value_iteration, MdpDocument, MdpSpec, Policy};
use mdp_stability::onpolicy::{analyze, make_toy_policy, EmbeddedMdp};
use mdp_stability::safety::{certify_safety, hitting_time, SafetyQuery, StartDistribution};
use mdp_stability::scenarios::{
    build_playing_dead, playing_dead_distance_bound, playing_dead_fixture, random_family, RandomFamily,
};
use mdp_stability::transport::{solve_transport, TransportProblem};
use mdp_stability::Error;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::NotConverged { .. } | Error::NumericalSolve { .. } => PyRuntimeError::new_err(err.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Round-trips through `json.loads` so results arrive as plain dicts and lists.
fn to_object<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn bisim_config(mdp: &MdpSpec, c_r: Option<f64>, c_t: Option<f64>, tol: f64) -> PyResult<BisimConfig> {
    let gamma = mdp.discount();
    BisimConfig::new(c_r.unwrap_or(1.0 - gamma), c_t.unwrap_or(gamma), tol).map_err(to_py)
}

/// A validated finite MDP with a safe set.
#[pyclass(name = "Mdp", module = "mdp_stability", frozen)]
struct PyMdp {
    inner: MdpSpec,
}

#[pymethods]
impl PyMdp {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: MdpSpec::from_json(text).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.inner.n_actions()
    }

    #[getter]
    fn states(&self) -> Vec<String> {
        self.inner.state_ids().to_vec()
    }

    #[getter]
    fn actions(&self) -> Vec<String> {
        self.inner.action_ids().to_vec()
    }

    #[getter]
    fn discount(&self) -> f64 {
        self.inner.discount()
    }

    #[getter]
    fn safe(&self) -> Vec<String> {
        self.inner.safe().iter().map(|&s| self.inner.state_ids()[s].clone()).collect()
    }

    #[pyo3(signature = (tol = 1e-10))]
    fn optimal_values(&self, tol: f64) -> PyResult<Vec<f64>> {
        Ok(value_iteration(&self.inner, tol).map_err(to_py)?.values)
    }

    fn __repr__(&self) -> String {
        format!(
            "Mdp(states={}, actions={}, discount={}, safe={:?})",
            self.inner.n_states(),
            self.inner.n_actions(),
            self.inner.discount(),
            self.safe()
        )
    }
}

/// An MDP whose states carry embedding coordinates.
#[pyclass(name = "EmbeddedMdp", module = "mdp_stability", frozen)]
struct PyEmbeddedMdp {
    inner: EmbeddedMdp,
}

#[pymethods]
impl PyEmbeddedMdp {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: EmbeddedMdp::from_json(text).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.to_document()).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn mdp(&self) -> PyMdp {
        PyMdp {
            inner: self.inner.base.clone(),
        }
    }

    #[getter]
    fn embedding(&self) -> Vec<Vec<f64>> {
        self.inner.embedding.clone()
    }

    /// Shutdown probability, transient set, spectral radius and rate bound
    /// under `softmax(W x / T)`; the start is uniform over non-safe states
    /// unless given.
    #[pyo3(signature = (weights, temperature = 1.0, start = None))]
    fn analyze<'py>(
        &self,
        py: Python<'py>,
        weights: Vec<Vec<f64>>,
        temperature: f64,
        start: Option<Vec<f64>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let policy = make_toy_policy(weights, temperature)
            .map_err(to_py)?
            .tightened_for(&self.inner.embedding);
        let start = match start {
            Some(w) => StartDistribution::new(w).map_err(to_py)?,
            None => uniform_start(&self.inner.base)?,
        };
        to_object(py, &analyze(&self.inner, &policy, &start).map_err(to_py)?)
    }
}

fn uniform_start(mdp: &MdpSpec) -> PyResult<StartDistribution> {
    let free = mdp.non_safe();
    if free.is_empty() {
        return Err(PyValueError::new_err("every state is safe"));
    }
    let mut w = vec![0.0; mdp.n_states()];
    for &s in &free {
        w[s] = 1.0 / free.len() as f64;
    }
    StartDistribution::new(w).map_err(to_py)
}

/// Violations of an MDP document, as dicts; empty when valid.
#[pyfunction]
fn validate_json<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    let doc: MdpDocument = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_object(py, &doc.validate().violations)
}

/// Cross bisimulation metric of two MDPs plus its Hausdorff distance.
#[pyfunction]
#[pyo3(signature = (m1, m2, c_r = None, c_t = None, tol = 1e-6))]
fn bisim_metric<'py>(
    py: Python<'py>,
    m1: &PyMdp,
    m2: &PyMdp,
    c_r: Option<f64>,
    c_t: Option<f64>,
    tol: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let config = bisim_config(&m1.inner, c_r, c_t, tol)?;
    let metric = cross_bisim_metric(&m1.inner, &m2.inner, &config).map_err(to_py)?;
    let out = to_object(py, &metric)?;
    out.set_item("hausdorff", hausdorff_of(&metric.dist))?;
    Ok(out)
}

/// Worst expected shutdown time over epsilon-optimal deterministic policies.
#[pyfunction]
#[pyo3(signature = (mdp, epsilon, horizon = None, start = None))]
fn certify<'py>(
    py: Python<'py>,
    mdp: &PyMdp,
    epsilon: f64,
    horizon: Option<f64>,
    start: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut query = SafetyQuery::worst_case(epsilon);
    if let Some(w) = start {
        query = query.with_start(StartDistribution::new(w).map_err(to_py)?);
    }
    if let Some(n) = horizon {
        query = query.with_horizons(vec![n]);
    }
    let cert = py.detach(|| certify_safety(&mdp.inner, &query)).map_err(to_py)?;
    to_object(py, &cert)
}

/// Expected steps to the safe set under a deterministic policy (action index per state).
#[pyfunction]
#[pyo3(signature = (mdp, policy, start = None))]
fn expected_shutdown_time(mdp: &PyMdp, policy: Vec<usize>, start: Option<Vec<f64>>) -> PyResult<f64> {
    let policy = Policy::Deterministic(policy);
    policy.check(&mdp.inner).map_err(to_py)?;
    let chain = induce_chain(&mdp.inner, &policy).map_err(to_py)?;
    let start = match start {
        Some(w) => StartDistribution::new(w).map_err(to_py)?,
        None => uniform_start(&mdp.inner)?,
    };
    hitting_time(&chain, &start).map_err(to_py)
}

/// Exact optimal transport between `mu` and `nu`: `(value, plan, u, v)`.
#[pyfunction]
fn transport(mu: Vec<f64>, nu: Vec<f64>, cost: Vec<Vec<f64>>) -> PyResult<(f64, Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    let problem = TransportProblem::new(mu, nu, cost).map_err(to_py)?;
    let sol = solve_transport(&problem).map_err(to_py)?;
    Ok((sol.value, sol.plan, sol.dual_u, sol.dual_v))
}

/// The built-in three-state base and its playing-dead variant.
#[pyfunction]
#[pyo3(signature = (gamma = 0.9, epsilon = 0.5, delta = 1e-3))]
fn playing_dead(gamma: f64, epsilon: f64, delta: f64) -> PyResult<(PyMdp, PyMdp)> {
    let params = playing_dead_fixture(gamma, epsilon, delta).map_err(to_py)?;
    let variant = build_playing_dead(&params).map_err(to_py)?;
    Ok((PyMdp { inner: params.base }, PyMdp { inner: variant }))
}

#[pyfunction]
fn playing_dead_bound(gamma: f64, delta: f64) -> f64 {
    playing_dead_distance_bound(gamma, delta)
}

/// Seeded random embedded MDP.
#[pyfunction]
#[pyo3(signature = (seed, n_states = 6, n_actions = 2, dim = 2, discount = 0.9))]
fn random_embedded(seed: u64, n_states: usize, n_actions: usize, dim: usize, discount: f64) -> PyResult<PyEmbeddedMdp> {
    let mut family = RandomFamily::new(n_states, n_actions, dim);
    family.discount = discount;
    Ok(PyEmbeddedMdp {
        inner: random_family(seed, &family).map_err(to_py)?,
    })
}

#[pymodule]
#[pyo3(name = "mdp_stability")]
fn mdp_stability_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMdp>()?;
    m.add_class::<PyEmbeddedMdp>()?;
    m.add_function(wrap_pyfunction!(validate_json, m)?)?;
    m.add_function(wrap_pyfunction!(bisim_metric, m)?)?;
    m.add_function(wrap_pyfunction!(certify, m)?)?;
    m.add_function(wrap_pyfunction!(expected_shutdown_time, m)?)?;
    m.add_function(wrap_pyfunction!(transport, m)?)?;
    m.add_function(wrap_pyfunction!(playing_dead, m)?)?;
    m.add_function(wrap_pyfunction!(playing_dead_bound, m)?)?;
    m.add_function(wrap_pyfunction!(random_embedded, m)?)?;
    Ok(())
}
