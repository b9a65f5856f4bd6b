//! Python bindings: datasets, partitions, the SSL and clustering primitives,
//! aggregation weights, fairness statistics and whole experiment runs.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use calibre_core::calibre::kmeans as core_kmeans;
use calibre_core::config::{parse_config, parse_override, ExperimentConfig};
use calibre_core::data::{load_dataset_dir, make_synthetic_dataset, save_dataset_dir, Dataset};
use calibre_core::experiment::{execute, run_experiment, ExperimentOutcome};
use calibre_core::federated;
use calibre_core::partition::{self, ClientDataset};
use calibre_core::personalize;
use calibre_core::ssl;
use calibre_core::tensor::Tensor;
use calibre_core::Error;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e @ (Error::Parameter { .. }
        | Error::Config(_)
        | Error::Format(_)
        | Error::Dimension { .. }
        | Error::PartitionInfeasible { .. }
        | Error::DegenerateVector { .. }) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_overrides(items: Vec<String>) -> PyResult<Vec<(String, String)>> {
    items.iter().map(|s| parse_override(s).map_err(to_py)).collect()
}

/// Labeled feature vectors.
#[pyclass(name = "Dataset", module = "calibre_py")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (num_classes, dim, samples_per_class, cluster_spread=0.05, seed=0))]
    fn synthetic(num_classes: usize, dim: usize, samples_per_class: usize, cluster_spread: f64, seed: u64) -> PyResult<Self> {
        let inner = make_synthetic_dataset(num_classes, dim, samples_per_class, cluster_spread, seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Reads a directory holding `meta.json`, `features.bin` and `labels.bin`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_dataset_dir(path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_dataset_dir(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn features(&self) -> Vec<Vec<f64>> {
        self.inner.samples.iter().map(|s| s.features.clone()).collect()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.samples.iter().map(|s| s.label).collect()
    }

    fn class_counts(&self) -> Vec<usize> {
        self.inner.class_counts()
    }
}

/// One client's share of a dataset.
#[pyclass(name = "ClientData", module = "calibre_py", get_all)]
struct PyClientData {
    client_id: usize,
    train_size: usize,
    test_size: usize,
    class_histogram: Vec<usize>,
    /// Dataset indices of the training samples followed by the test samples.
    origin: Vec<usize>,
}

impl From<ClientDataset> for PyClientData {
    fn from(c: ClientDataset) -> Self {
        Self {
            client_id: c.client_id,
            train_size: c.train.len(),
            test_size: c.test.len(),
            class_histogram: c.class_histogram,
            origin: c.origin,
        }
    }
}

#[pymethods]
impl PyClientData {
    fn __repr__(&self) -> String {
        format!("ClientData(id={}, train={}, test={})", self.client_id, self.train_size, self.test_size)
    }
}

#[pyfunction]
#[pyo3(signature = (dataset, num_clients, concentration=0.3, min_train=8, seed=0))]
fn partition_dirichlet(
    dataset: &PyDataset,
    num_clients: usize,
    concentration: f64,
    min_train: usize,
    seed: u64,
) -> PyResult<Vec<PyClientData>> {
    let parts = partition::partition_dirichlet(&dataset.inner, num_clients, concentration, min_train, seed).map_err(to_py)?;
    Ok(parts.into_iter().map(Into::into).collect())
}

#[pyfunction]
#[pyo3(signature = (dataset, num_clients, classes_per_client, samples_per_client, seed=0))]
fn partition_quantity(
    dataset: &PyDataset,
    num_clients: usize,
    classes_per_client: usize,
    samples_per_client: usize,
    seed: u64,
) -> PyResult<Vec<PyClientData>> {
    let parts = partition::partition_quantity(&dataset.inner, num_clients, classes_per_client, samples_per_client, seed)
        .map_err(to_py)?;
    Ok(parts.into_iter().map(Into::into).collect())
}

/// NT-Xent over rows `2i`, `2i + 1` as positive pairs.
#[pyfunction]
#[pyo3(signature = (h, tau=0.5))]
fn ntxent(h: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    ssl::ntxent_value(&h, tau).map_err(to_py)
}

#[pyfunction]
fn cosine_pair(h1: Vec<Vec<f64>>, h2: Vec<Vec<f64>>) -> PyResult<f64> {
    ssl::cosine_pair_value(&h1, &h2).map_err(to_py)
}

#[pyclass(name = "Clustering", module = "calibre_py", get_all)]
struct PyClustering {
    centroids: Vec<Vec<f64>>,
    assignments: Vec<usize>,
    counts: Vec<usize>,
    inertia: f64,
    inertia_history: Vec<f64>,
}

/// k-means++ seeding followed by Lloyd iterations.
#[pyfunction]
#[pyo3(signature = (points, k, seed=0))]
fn kmeans(points: Vec<Vec<f64>>, k: usize, seed: u64) -> PyResult<PyClustering> {
    let t = Tensor::from_rows(&points).map_err(to_py)?;
    let p = core_kmeans(&t, k, seed).map_err(to_py)?;
    Ok(PyClustering {
        centroids: p.centroids,
        assignments: p.assignments,
        counts: p.counts,
        inertia: p.inertia,
        inertia_history: p.inertia_history,
    })
}

#[pyfunction]
fn fedavg_weights(num_samples: Vec<usize>) -> Vec<f64> {
    federated::fedavg_weights(&num_samples)
}

#[pyfunction]
#[pyo3(signature = (num_samples, divergences, temperature=None))]
fn divergence_weights(num_samples: Vec<usize>, divergences: Vec<f64>, temperature: Option<f64>) -> PyResult<Vec<f64>> {
    federated::divergence_weights(&num_samples, &divergences, temperature).map_err(to_py)
}

/// `(mean, population variance, std)`, or `None` for an empty list.
#[pyfunction]
fn fairness_stats(accuracies: Vec<f64>) -> Option<(f64, f64, f64)> {
    personalize::fairness_stats(&accuracies).map(|s| (s.mean, s.variance, s.std))
}

/// A validated experiment configuration.
#[pyclass(name = "Config", module = "calibre_py")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Loads a TOML file; `overrides` are `"dot.path=value"` strings.
    #[staticmethod]
    #[pyo3(signature = (path, overrides=Vec::new()))]
    fn from_file(path: PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        let ov = parse_overrides(overrides)?;
        Ok(Self { inner: parse_config(path, &ov).map_err(to_py)? })
    }

    /// Parses TOML text; relative paths resolve against `base_dir`.
    #[staticmethod]
    #[pyo3(signature = (text, base_dir=PathBuf::from("."), overrides=Vec::new()))]
    fn from_toml(text: &str, base_dir: PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        let ov = parse_overrides(overrides)?;
        Ok(Self { inner: ExperimentConfig::from_toml_str(text, &base_dir, &ov).map_err(to_py)? })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(to_py)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir.clone()
    }
}

/// Result of a finished run.
#[pyclass(name = "RunResult", module = "calibre_py")]
struct PyRunResult {
    outcome: ExperimentOutcome,
}

#[pymethods]
impl PyRunResult {
    /// `(client_id, split, accuracy)` per evaluated client.
    fn accuracies(&self) -> Vec<(usize, &'static str, f64)> {
        self.outcome
            .metrics
            .personalization
            .clients
            .iter()
            .map(|c| (c.client_id, c.split.as_str(), c.accuracy))
            .collect()
    }

    /// Mean and population variance over all evaluated clients.
    fn summary(&self) -> Option<(f64, f64)> {
        self.outcome.metrics.personalization.combined.map(|s| (s.mean, s.variance))
    }

    /// Mean self-supervised loss of each round.
    fn round_losses(&self) -> Vec<f64> {
        self.outcome.metrics.rounds.iter().map(|r| r.mean_l_s()).collect()
    }

    /// The same document written to `metrics.json`.
    fn metrics_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.outcome.metrics).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn parameters(&self) -> Vec<f64> {
        self.outcome.model.flatten()
    }
}

/// Runs training and personalization in memory without writing files.
#[pyfunction]
fn run(py: Python<'_>, config: &PyConfig) -> PyResult<PyRunResult> {
    let cfg = config.inner.clone();
    let outcome = py.detach(move || run_experiment(&cfg, None)).map_err(to_py)?;
    Ok(PyRunResult { outcome })
}

/// Runs the experiment and writes every artifact to the output directory.
#[pyfunction]
fn run_to_disk(py: Python<'_>, config: &PyConfig) -> PyResult<PyRunResult> {
    let cfg = config.inner.clone();
    let outcome = py.detach(move || execute(&cfg)).map_err(to_py)?;
    Ok(PyRunResult { outcome })
}

#[pymodule]
pub fn calibre_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyClientData>()?;
    m.add_class::<PyClustering>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(partition_dirichlet, m)?)?;
    m.add_function(wrap_pyfunction!(partition_quantity, m)?)?;
    m.add_function(wrap_pyfunction!(ntxent, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_pair, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(fedavg_weights, m)?)?;
    m.add_function(wrap_pyfunction!(divergence_weights, m)?)?;
    m.add_function(wrap_pyfunction!(fairness_stats, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_to_disk, m)?)?;
    Ok(())
}
