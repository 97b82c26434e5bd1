//! Python bindings. Structured results cross the boundary as plain Python
//! objects (dicts, lists, floats) built from their JSON form; datasets stay
//! on the Rust side behind `Dataset`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::de::DeserializeOwned;
use serde::Serialize;

use feelab::delay::pava_decreasing as pava;
use feelab::estimate::{self as est, EstimateConfig};
use feelab::io::{IngestConfig, InputPaths};
use feelab::market::tie_aware_percentile as percentile;
use feelab::pipeline::{self, RunConfig, SimulationSpec};
use feelab::sim::{vcg_payment_bruteforce, vcg_payment_discrete, StaticInstance};

fn py_err(e: feelab::Error) -> PyErr {
    let msg = format!("{}: {e}", e.category());
    match e.category() {
        "io" => PyIOError::new_err(msg),
        "input" | "config" => PyValueError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Reads an optional Python object (dict or JSON string) into a config type.
fn from_py<T: DeserializeOwned + Default>(py: Python<'_>, value: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let Some(v) = value else { return Ok(T::default()) };
    let text: String = match v.extract::<String>() {
        Ok(s) => s,
        Err(_) => py.import("json")?.call_method1("dumps", (v,))?.extract()?,
    };
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(format!("config: {e}")))
}

/// Epoch-assigned transaction records.
#[pyclass(name = "Dataset", module = "feelab")]
struct PyDataset {
    inner: est::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset { inner: feelab::io::read_json(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        feelab::io::write_json(&path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn n_rows(&self) -> usize {
        self.inner.txs.len()
    }

    #[getter]
    fn n_epochs(&self) -> usize {
        self.inner.epochs.len()
    }

    /// Fee rates (sat/vB) in record order.
    fn fee_rates(&self) -> Vec<f64> {
        self.inner.txs.iter().map(|t| t.fee_rate().as_f64()).collect()
    }

    fn epoch_ids(&self) -> Vec<Option<usize>> {
        self.inner.txs.iter().map(|t| t.epoch_id).collect()
    }

    /// Tie-aware percentile per record within its epoch.
    fn percentiles(&self) -> Vec<Option<f64>> {
        feelab::market::rank_within_epochs(&self.inner.txs).iter().map(|r| r.map(|r| r.percentile)).collect()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(rows={}, epochs={})", self.n_rows(), self.n_epochs())
    }
}

/// Simulates a market into `out_dir`; returns the written file paths.
#[pyfunction]
#[pyo3(signature = (out_dir, spec=None))]
fn simulate(py: Python<'_>, out_dir: PathBuf, spec: Option<&Bound<'_, PyAny>>) -> PyResult<Py<PyAny>> {
    let spec: SimulationSpec = from_py(py, spec)?;
    to_py(py, &pipeline::simulate_to_dir(&spec, &out_dir).map_err(py_err)?)
}

/// Reads and joins input files; returns the dataset and the ingestion report.
#[pyfunction]
#[pyo3(signature = (transactions, snapshots, links=None, weights=None, config=None))]
fn ingest(
    py: Python<'_>,
    transactions: PathBuf,
    snapshots: PathBuf,
    links: Option<PathBuf>,
    weights: Option<PathBuf>,
    config: Option<&Bound<'_, PyAny>>,
) -> PyResult<(PyDataset, Py<PyAny>)> {
    let cfg: IngestConfig = from_py(py, config)?;
    let paths = InputPaths { transactions, snapshots, links, external_weights: weights };
    let (ds, report) = feelab::io::ingest(&paths, &cfg).map_err(py_err)?;
    Ok((PyDataset { inner: ds }, to_py(py, &report)?))
}

/// Midpoint-ECDF percentiles of a sample.
#[pyfunction]
fn tie_aware_percentile(values: Vec<f64>) -> PyResult<Vec<f64>> {
    percentile(&values).map_err(py_err)
}

/// L2 projection onto weakly decreasing sequences.
#[pyfunction]
fn pava_decreasing(values: Vec<f64>) -> Vec<f64> {
    pava(&values)
}

/// VCG payment of the transaction at 1-based priority rank `m`.
#[pyfunction]
#[pyo3(signature = (costs, m, slots_per_block=1, bruteforce=false))]
fn vcg_payment(costs: Vec<f64>, m: usize, slots_per_block: usize, bruteforce: bool) -> PyResult<f64> {
    let inst = StaticInstance::from_costs(costs, slots_per_block).map_err(py_err)?;
    if bruteforce { vcg_payment_bruteforce(&inst, m) } else { vcg_payment_discrete(&inst, m) }.map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (instances=10_000, max_n=12, seed=0, grid=1000))]
fn vcg_check(py: Python<'_>, instances: usize, max_n: usize, seed: u64, grid: usize) -> PyResult<Py<PyAny>> {
    to_py(py, &pipeline::vcg_check(instances, max_n, seed, grid).map_err(py_err)?)
}

/// Both estimation stages; returns the fee equation fit and stage-1 metrics.
#[pyfunction]
#[pyo3(signature = (dataset, config=None))]
fn estimate(py: Python<'_>, dataset: &PyDataset, config: Option<&Bound<'_, PyAny>>) -> PyResult<Py<PyAny>> {
    let cfg: EstimateConfig = from_py(py, config)?;
    let out_fit = est::estimate(&dataset.inner, &cfg).map_err(py_err)?;
    let out = serde_json::json!({
        "fee": out_fit.fee,
        "delay_metrics": out_fit.delay.metrics,
        "trivial_share": out_fit.delay.regimes.trivial_share,
        "rows": out_fit.sample.delay_rows.len(),
        "fee_rows": out_fit.sample.fee_rows.len(),
    });
    to_py(py, &out)
}

#[pyfunction]
#[pyo3(signature = (dataset, replicates, seed=0, config=None))]
fn bootstrap(
    py: Python<'_>,
    dataset: &PyDataset,
    replicates: usize,
    seed: u64,
    config: Option<&Bound<'_, PyAny>>,
) -> PyResult<Py<PyAny>> {
    let cfg: EstimateConfig = from_py(py, config)?;
    to_py(py, &est::bootstrap(&dataset.inner, &cfg, replicates, seed).map_err(py_err)?)
}

/// Full pipeline; `config` is a dict, a JSON string, or omitted for defaults.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn run_pipeline(py: Python<'_>, config: Option<&Bound<'_, PyAny>>) -> PyResult<Py<PyAny>> {
    let cfg: RunConfig = from_py(py, config)?;
    to_py(py, &pipeline::run_pipeline(&cfg).map_err(py_err)?)
}

#[pyfunction]
fn default_run_config(py: Python<'_>) -> PyResult<Py<PyAny>> {
    to_py(py, &RunConfig::default())
}

#[pymodule(name = "feelab")]
fn feelab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(ingest, m)?)?;
    m.add_function(wrap_pyfunction!(tie_aware_percentile, m)?)?;
    m.add_function(wrap_pyfunction!(pava_decreasing, m)?)?;
    m.add_function(wrap_pyfunction!(vcg_payment, m)?)?;
    m.add_function(wrap_pyfunction!(vcg_check, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(default_run_config, m)?)?;
    Ok(())
}
