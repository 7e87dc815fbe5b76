//! Python bindings: single environments, training runs and summaries.

use moerl::cli::gradcheck::gradcheck_suite;
use moerl::envs::{reset, EnvState, GameId, UnifiedAction, OBS_DIM};
use moerl::harness::{run as run_harness, RunOptions};
use moerl::metrics::{MetricsRow, MetricsSink, CSV_HEADER};
use moerl::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::PathBuf;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn padded(obs: &moerl::envs::Observation) -> Vec<f64> {
    let mut out = vec![0.0; OBS_DIM];
    obs.write_padded(&mut out);
    out
}

/// One MinAtar game over the unified action space.
#[pyclass(module = "moerl_py", unsendable)]
struct Env {
    state: EnvState,
}

#[pymethods]
impl Env {
    #[new]
    fn new(game: &str, seed: u64) -> PyResult<Self> {
        let game: GameId = game.parse().map_err(py_err)?;
        Ok(Self { state: reset(game, seed).0 })
    }

    #[getter]
    fn game(&self) -> &'static str {
        self.state.game().short_name()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.state.steps()
    }

    #[getter]
    fn done(&self) -> bool {
        self.state.is_done()
    }

    /// Padded observation, `OBS_DIM` floats.
    fn observation(&self) -> Vec<f64> {
        padded(&self.state.observation())
    }

    /// Returns `(observation, reward, done, truncated)`.
    fn step(&mut self, action: usize) -> PyResult<(Vec<f64>, f64, bool, bool)> {
        let a = UnifiedAction::new(action).map_err(py_err)?;
        let r = self.state.step(a).map_err(py_err)?;
        Ok((padded(&r.observation), r.reward, r.done, r.truncated))
    }
}

fn row_dict<'py>(py: Python<'py>, r: &MetricsRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", r.step)?;
    d.set_item("task", &r.task)?;
    d.set_item("seed", r.seed)?;
    d.set_item("return_raw", r.return_raw)?;
    d.set_item("return_norm", r.return_norm)?;
    d.set_item("dormant_actor", r.dormant_actor)?;
    d.set_item("dormant_critic", r.dormant_critic)?;
    d.set_item("grad_sim", r.grad_sim)?;
    d.set_item("policy_loss", r.policy_loss)?;
    d.set_item("value_loss", r.value_loss)?;
    d.set_item("entropy", r.entropy)?;
    d.set_item("grad_norm", r.grad_norm)?;
    d.set_item("expert_probs", r.expert_probs.clone())?;
    Ok(d)
}

/// Trains one seed of a JSON config (same schema as `moerl run`) and returns
/// the metrics rows. With `csv`, rows are also written there.
#[pyfunction]
#[pyo3(signature = (config, seed, csv=None, preset=None))]
fn run<'py>(
    py: Python<'py>,
    config: &str,
    seed: u64,
    csv: Option<PathBuf>,
    preset: Option<&str>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let doc = serde_json::from_str(config).map_err(|e| PyValueError::new_err(format!("config: {e}")))?;
    let cfg = moerl::cli::resolve(doc, preset).map_err(py_err)?.run_config();
    let outcome = py
        .detach(|| {
            let mut sink = csv.as_deref().map(MetricsSink::create).transpose()?;
            run_harness(&cfg, seed, sink.as_mut(), &RunOptions::default())
        })
        .map_err(py_err)?;
    outcome.rows.iter().map(|r| row_dict(py, r)).collect()
}

/// `moerl summarize --json` as a string.
#[pyfunction]
#[pyo3(signature = (paths, iqm=false))]
fn summarize(paths: Vec<PathBuf>, iqm: bool) -> PyResult<String> {
    let groups = moerl::cli::summarize(&paths, iqm).map_err(py_err)?;
    serde_json::to_string(&groups).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Largest relative error of each finite-difference check.
#[pyfunction]
fn gradcheck() -> PyResult<Vec<(String, f64)>> {
    Ok(gradcheck_suite()
        .map_err(py_err)?
        .into_iter()
        .map(|(n, r)| (n.to_string(), r.max_rel_err))
        .collect())
}

#[pyfunction]
fn presets() -> Vec<String> {
    moerl::cli::preset_names()
}

#[pymodule]
fn moerl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Env>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add("CSV_HEADER", CSV_HEADER.to_vec())?;
    m.add("OBS_DIM", OBS_DIM)?;
    m.add("__version__", moerl::cli::CODE_VERSION)?;
    Ok(())
}
