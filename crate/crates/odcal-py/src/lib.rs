//! Python bindings for the calibration engine: network construction, the
//! simulation environment, demand evaluation, PPO training, the BO
//! baselines, and the metrics/statistics pipeline. Tables cross the
//! boundary as plain nested lists; trajectories get a small wrapper class
//! so results can be re-evaluated without reshaping.

use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use odcal::baselines::{bo_calibrate, BoConfig, BoMode, DemandEncoding};
use odcal::env::{evaluate_demand, Env, EnvConfig, GroundTruthTable, Trajectory};
use odcal::experiments::generate_true_demand;
use odcal::metrics::table_metrics;
use odcal::network::{build_nguyen_dupuis, NetworkSpec};
use odcal::neural::AdamConfig;
use odcal::ppo::{train, PpoConfig};
use odcal::stats::significance_pipeline;

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn table_to_rows(table: &GroundTruthTable) -> Vec<Vec<u32>> {
    table.rows.clone()
}

fn rows_to_table(rows: Vec<Vec<u32>>) -> PyResult<GroundTruthTable> {
    if let Some(w) = rows.first().map(Vec::len) {
        if rows.iter().any(|r| r.len() != w) {
            return Err(PyValueError::new_err("table rows must have equal length"));
        }
    }
    Ok(GroundTruthTable { rows })
}

/// The road network: nodes, directed links, OD pairs, detector placement.
#[pyclass(name = "Network", frozen)]
struct PyNetwork {
    spec: NetworkSpec,
}

#[pymethods]
impl PyNetwork {
    /// The standard 13-node benchmark network. `scale` is the length in
    /// meters of one unit of canonical link cost.
    #[staticmethod]
    #[pyo3(signature = (scale=3.0))]
    fn nguyen_dupuis(scale: f64) -> PyResult<Self> {
        if !(scale > 0.0) {
            return Err(PyValueError::new_err("scale must be positive"));
        }
        Ok(PyNetwork { spec: build_nguyen_dupuis(scale) })
    }

    #[getter]
    fn n_nodes(&self) -> usize {
        self.spec.nodes.len()
    }

    #[getter]
    fn n_links(&self) -> usize {
        self.spec.links.len()
    }

    #[getter]
    fn od_pairs(&self) -> Vec<(u32, u32)> {
        self.spec.od_pairs.clone()
    }

    /// Link ids carrying detectors, in table column order.
    #[getter]
    fn detectors(&self) -> Vec<usize> {
        self.spec.detectors.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(nodes={}, links={}, od_pairs={}, detectors={})",
            self.spec.nodes.len(),
            self.spec.links.len(),
            self.spec.od_pairs.len(),
            self.spec.detectors.len()
        )
    }
}

/// A binary demand trajectory: one row per input step, one bit per OD pair.
#[pyclass(name = "Trajectory", frozen)]
#[derive(Clone)]
struct PyTrajectory {
    inner: Trajectory,
}

#[pymethods]
impl PyTrajectory {
    #[new]
    fn new(bits: Vec<Vec<bool>>) -> PyResult<Self> {
        if let Some(w) = bits.first().map(Vec::len) {
            if bits.iter().any(|r| r.len() != w) {
                return Err(PyValueError::new_err("trajectory rows must have equal length"));
            }
        }
        Ok(PyTrajectory { inner: Trajectory { bits } })
    }

    #[staticmethod]
    fn zeros(t_steps: usize, n_od: usize) -> Self {
        PyTrajectory { inner: Trajectory::zeros(t_steps, n_od) }
    }

    #[getter]
    fn bits(&self) -> Vec<Vec<bool>> {
        self.inner.bits.clone()
    }

    #[getter]
    fn t_steps(&self) -> usize {
        self.inner.t_steps()
    }

    #[getter]
    fn n_od(&self) -> usize {
        self.inner.n_od()
    }

    fn total_vehicles(&self) -> u64 {
        self.inner.total_vehicles()
    }

    /// Sums rows into aggregation-interval by OD-pair counts.
    fn interval_totals(&self, inputs_per_output: usize) -> PyResult<Vec<Vec<u32>>> {
        if inputs_per_output == 0 || self.inner.t_steps() % inputs_per_output != 0 {
            return Err(PyValueError::new_err(
                "inputs_per_output must evenly divide the trajectory length",
            ));
        }
        Ok(self.inner.interval_totals(inputs_per_output))
    }

    fn __repr__(&self) -> String {
        format!(
            "Trajectory(t_steps={}, n_od={}, vehicles={})",
            self.inner.t_steps(),
            self.inner.n_od(),
            self.inner.total_vehicles()
        )
    }
}

/// Environment configuration: network, timing, discount, and the ground
/// truth the reward compares against.
#[pyclass(name = "Environment", frozen)]
struct PyEnvironment {
    cfg: Arc<EnvConfig>,
}

#[pymethods]
impl PyEnvironment {
    #[new]
    #[pyo3(signature = (
        network,
        ground_truth=None,
        t_steps=360,
        inputs_per_output=60,
        steps_per_input=5,
        sim_dt=1.0,
        gamma=0.995,
    ))]
    fn new(
        network: &PyNetwork,
        ground_truth: Option<Vec<Vec<u32>>>,
        t_steps: u32,
        inputs_per_output: u32,
        steps_per_input: u32,
        sim_dt: f64,
        gamma: f64,
    ) -> PyResult<Self> {
        let k = if inputs_per_output > 0 { (t_steps / inputs_per_output) as usize } else { 0 };
        let truth = match ground_truth {
            Some(rows) => rows_to_table(rows)?,
            None => GroundTruthTable::zeros(k, network.spec.n_detectors()),
        };
        let mut cfg = EnvConfig::with_defaults(network.spec.clone(), truth);
        cfg.t_steps = t_steps;
        cfg.inputs_per_output = inputs_per_output;
        cfg.steps_per_input = steps_per_input;
        cfg.sim_dt = sim_dt;
        cfg.gamma = gamma;
        cfg.validate().map_err(value_err)?;
        Ok(PyEnvironment { cfg: Arc::new(cfg) })
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.cfg.obs_dim()
    }

    #[getter]
    fn n_od(&self) -> usize {
        self.cfg.n_od()
    }

    #[getter]
    fn k_intervals(&self) -> usize {
        self.cfg.k_intervals()
    }

    #[getter]
    fn t_steps(&self) -> u32 {
        self.cfg.t_steps
    }

    #[getter]
    fn ground_truth(&self) -> Vec<Vec<u32>> {
        table_to_rows(&self.cfg.ground_truth)
    }

    /// Starts one episode; drive it with `Episode.step`.
    fn episode(&self, seed: u64) -> PyResult<PyEpisode> {
        let (env, obs) = Env::new(Arc::clone(&self.cfg), seed).map_err(value_err)?;
        Ok(PyEpisode { env: Some(env), last_obs: obs })
    }

    fn __repr__(&self) -> String {
        format!(
            "Environment(t_steps={}, k_intervals={}, n_od={}, obs_dim={})",
            self.cfg.t_steps,
            self.cfg.k_intervals(),
            self.cfg.n_od(),
            self.cfg.obs_dim()
        )
    }
}

/// One running episode of the demand MDP.
#[pyclass(name = "Episode")]
struct PyEpisode {
    env: Option<Env>,
    last_obs: Vec<f64>,
}

#[pymethods]
impl PyEpisode {
    /// The observation produced by reset or the latest step.
    #[getter]
    fn observation(&self) -> Vec<f64> {
        self.last_obs.clone()
    }

    /// Applies one multi-binary action; returns (observation, reward, done).
    fn step(&mut self, action: Vec<bool>) -> PyResult<(Vec<f64>, f64, bool)> {
        let env = self
            .env
            .as_mut()
            .ok_or_else(|| PyValueError::new_err("episode is complete"))?;
        let result = env.step(&action).map_err(value_err)?;
        self.last_obs = result.observation.clone();
        if result.done {
            self.env = None;
        }
        Ok((result.observation, result.reward, result.done))
    }
}

/// Draws a demand trajectory totalling close to `total_vehicles`, simulates
/// it once, and returns (trajectory, detector table).
#[pyfunction]
#[pyo3(name = "generate_true_demand", signature = (env, total_vehicles, seed))]
fn py_generate_true_demand(
    py: Python<'_>,
    env: &PyEnvironment,
    total_vehicles: u64,
    seed: u64,
) -> PyResult<(PyTrajectory, Vec<Vec<u32>>)> {
    let cfg = Arc::clone(&env.cfg);
    let (traj, table) = py
        .allow_threads(move || generate_true_demand(total_vehicles, &cfg, seed))
        .map_err(value_err)?;
    Ok((PyTrajectory { inner: traj }, table_to_rows(&table)))
}

/// Simulates a fixed trajectory and returns (detector table, calibration
/// error against the environment's ground truth).
#[pyfunction]
#[pyo3(name = "evaluate_demand", signature = (env, trajectory, seed))]
fn py_evaluate_demand(
    py: Python<'_>,
    env: &PyEnvironment,
    trajectory: &PyTrajectory,
    seed: u64,
) -> PyResult<(Vec<Vec<u32>>, f64)> {
    let cfg = Arc::clone(&env.cfg);
    let demand = trajectory.inner.clone();
    let (table, error) = py
        .allow_threads(move || evaluate_demand(&cfg, &demand, seed))
        .map_err(value_err)?;
    Ok((table_to_rows(&table), error))
}

fn episodes_to_py(
    py: Python<'_>,
    episodes: &[odcal::ppo::EpisodeStat],
) -> PyResult<Vec<Py<PyDict>>> {
    episodes
        .iter()
        .map(|e| {
            let d = PyDict::new_bound(py);
            d.set_item("episode", e.episode)?;
            d.set_item("error", e.error)?;
            d.set_item("discounted_return", e.discounted_return)?;
            Ok(d.unbind())
        })
        .collect()
}

/// Trains the PPO agent and returns the best calibration found.
#[pyfunction]
#[pyo3(signature = (
    env,
    seed,
    budget_episodes=2000,
    hidden_dim=64,
    gae_lambda=None,
    clip_eps=None,
    c1=None,
    c2=None,
    epochs=None,
    minibatch=None,
    episodes_per_update=None,
    grad_clip=None,
    learning_rate=None,
))]
#[allow(clippy::too_many_arguments)]
fn train_ppo(
    py: Python<'_>,
    env: &PyEnvironment,
    seed: u64,
    budget_episodes: u32,
    hidden_dim: usize,
    gae_lambda: Option<f64>,
    clip_eps: Option<f64>,
    c1: Option<f64>,
    c2: Option<f64>,
    epochs: Option<u32>,
    minibatch: Option<usize>,
    episodes_per_update: Option<u32>,
    grad_clip: Option<f64>,
    learning_rate: Option<f64>,
) -> PyResult<Py<PyDict>> {
    let mut cfg = PpoConfig { budget_episodes, hidden_dim, ..PpoConfig::default() };
    if let Some(v) = gae_lambda {
        cfg.lambda = v;
    }
    if let Some(v) = clip_eps {
        cfg.clip_eps = v;
    }
    if let Some(v) = c1 {
        cfg.c1 = v;
    }
    if let Some(v) = c2 {
        cfg.c2 = v;
    }
    if let Some(v) = epochs {
        cfg.epochs = v;
    }
    if let Some(v) = minibatch {
        cfg.minibatch = v;
    }
    if let Some(v) = episodes_per_update {
        cfg.episodes_per_update = v;
    }
    if let Some(v) = grad_clip {
        cfg.grad_clip = v;
    }
    if let Some(lr) = learning_rate {
        cfg.adam = AdamConfig { lr, ..cfg.adam };
    }
    let env_cfg = Arc::clone(&env.cfg);
    let result = py
        .allow_threads(move || train(&env_cfg, &cfg, seed, None))
        .map_err(runtime_err)?;
    let d = PyDict::new_bound(py);
    d.set_item("best_error", result.best_error)?;
    d.set_item("best_table", table_to_rows(&result.best_table))?;
    d.set_item(
        "best_trajectory",
        Py::new(py, PyTrajectory { inner: result.best_trajectory })?,
    )?;
    d.set_item("episodes", episodes_to_py(py, &result.episodes)?)?;
    Ok(d.unbind())
}

/// Runs one Bayesian-optimization calibration.
#[pyfunction]
#[pyo3(name = "bo_calibrate", signature = (
    env,
    seed,
    mode="simultaneous",
    input_interval_s=300.0,
    iterations=200,
    initial_samples=16,
))]
fn py_bo_calibrate(
    py: Python<'_>,
    env: &PyEnvironment,
    seed: u64,
    mode: &str,
    input_interval_s: f64,
    iterations: u32,
    initial_samples: u32,
) -> PyResult<Py<PyDict>> {
    let mode = match mode {
        "simultaneous" => BoMode::Simultaneous,
        "sequential" => BoMode::Sequential,
        other => {
            return Err(PyValueError::new_err(format!(
                "mode must be 'simultaneous' or 'sequential', got '{other}'"
            )))
        }
    };
    let cfg = BoConfig { mode, input_interval_s, iterations, initial_samples, ..BoConfig::default() };
    let env_cfg = Arc::clone(&env.cfg);
    let run = py
        .allow_threads(move || bo_calibrate(&env_cfg, &cfg, seed))
        .map_err(runtime_err)?;
    let d = PyDict::new_bound(py);
    d.set_item("best_error", run.result.best_error)?;
    d.set_item("best_table", table_to_rows(&run.result.best_table))?;
    d.set_item(
        "best_trajectory",
        Py::new(py, PyTrajectory { inner: run.result.best_trajectory })?,
    )?;
    d.set_item("episodes", episodes_to_py(py, &run.result.episodes)?)?;
    Ok(d.unbind())
}

/// Length of the flat decision vector a BO encoding uses for this
/// environment at the given input interval (seconds).
#[pyfunction]
fn encoding_dim(env: &PyEnvironment, input_interval_s: f64) -> PyResult<usize> {
    let cfg = BoConfig { input_interval_s, ..BoConfig::default() };
    let enc = DemandEncoding::for_config(&cfg, &env.cfg).map_err(value_err)?;
    Ok(enc.dim())
}

/// Error metrics between two equally shaped detector tables.
#[pyfunction]
#[pyo3(name = "table_metrics")]
fn py_table_metrics(
    py: Python<'_>,
    truth: Vec<Vec<u32>>,
    sim: Vec<Vec<u32>>,
) -> PyResult<Py<PyDict>> {
    let truth = rows_to_table(truth)?;
    let sim = rows_to_table(sim)?;
    let m = table_metrics(&truth, &sim).map_err(value_err)?;
    let d = PyDict::new_bound(py);
    d.set_item("mse", m.mse)?;
    d.set_item("rmse", m.rmse)?;
    d.set_item("mae", m.mae)?;
    d.set_item("mape", m.mape)?;
    d.set_item("sde", m.sde)?;
    d.set_item("p95_ae", m.p95_ae)?;
    d.set_item("max_ae", m.max_ae)?;
    d.set_item("mbe", m.mbe)?;
    d.set_item("r2", m.r2)?;
    d.set_item("n", m.n)?;
    Ok(d.unbind())
}

/// Per-detector normality-gated significance tests of a simulated table
/// against the truth table.
#[pyfunction]
#[pyo3(name = "significance_pipeline", signature = (sim, truth, network, alpha=0.05))]
fn py_significance_pipeline(
    py: Python<'_>,
    sim: Vec<Vec<u32>>,
    truth: Vec<Vec<u32>>,
    network: &PyNetwork,
    alpha: f64,
) -> PyResult<Vec<Py<PyDict>>> {
    let sim = rows_to_table(sim)?;
    let truth = rows_to_table(truth)?;
    let rows = significance_pipeline(&sim, &truth, &network.spec, alpha).map_err(value_err)?;
    rows.iter()
        .map(|r| {
            let d = PyDict::new_bound(py);
            d.set_item("detector_link", r.detector_link)?;
            d.set_item("test", r.chosen.test.to_string())?;
            d.set_item("statistic", r.chosen.statistic)?;
            d.set_item("p_value", r.chosen.p_value)?;
            d.set_item("n", r.chosen.n)?;
            d.set_item("normal", r.normal)?;
            d.set_item("shapiro_w", r.shapiro.as_ref().map(|s| s.w))?;
            d.set_item("shapiro_p", r.shapiro.as_ref().map(|s| s.p_value))?;
            Ok(d.unbind())
        })
        .collect()
}

#[pymodule]
fn odcal_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyEnvironment>()?;
    m.add_class::<PyEpisode>()?;
    m.add_function(wrap_pyfunction!(py_generate_true_demand, m)?)?;
    m.add_function(wrap_pyfunction!(py_evaluate_demand, m)?)?;
    m.add_function(wrap_pyfunction!(train_ppo, m)?)?;
    m.add_function(wrap_pyfunction!(py_bo_calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(encoding_dim, m)?)?;
    m.add_function(wrap_pyfunction!(py_table_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(py_significance_pipeline, m)?)?;
    Ok(())
}
