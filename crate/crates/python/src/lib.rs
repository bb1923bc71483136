//! Python bindings: adapters and their file format, merging, partitions,
//! baseline clusterers, loss oracles and the data-driven search.

use std::path::PathBuf;
use std::time::Duration;

use adapter_cluster::baseline::{default_top_k, features_flat, features_svd, kmeans as kmeans_impl, KMeansOptions};
use adapter_cluster::merge::{dare_merge as dare_impl, linear_merge as linear_impl, ties_merge as ties_impl, MergeMethod};
use adapter_cluster::metrics;
use adapter_cluster::oracle::synthetic_generate;
use adapter_cluster::partition::{dirichlet_partition as dirichlet_impl, random_partition as random_impl, Attribute};
use adapter_cluster::search::TraceRecord;
use adapter_cluster::tensor_store::{read_adapter, read_adapter_set, write_adapter, write_adapter_set};
use adapter_cluster::{
    AdapterMeta, AdapterSet, ExternalOracle, LoraAdapter, LossOracle, Matrix, MergeConfig, PartitionMap, SearchConfig,
    SyntheticSpec, SyntheticTaskModel, TensorMap,
};
use pyo3::exceptions::{PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[pyclass(name = "LoraAdapter", module = "adapter_cluster", frozen, from_py_object)]
#[derive(Clone)]
struct PyAdapter(LoraAdapter);

#[pymethods]
impl PyAdapter {
    /// `tensors` maps names such as `layer_0.lora_A` to row lists.
    #[new]
    #[pyo3(signature = (task_id, rank, alpha, tensors, group_label=None, lang_label=None))]
    fn new(
        task_id: String,
        rank: usize,
        alpha: f64,
        tensors: Vec<(String, Vec<Vec<f32>>)>,
        group_label: Option<String>,
        lang_label: Option<String>,
    ) -> PyResult<Self> {
        let mut weights = TensorMap::new();
        for (name, rows) in tensors {
            let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
            weights.insert(name, Matrix::from_rows(&refs).map_err(err)?).map_err(err)?;
        }
        let meta = AdapterMeta {
            task_id,
            rank,
            alpha,
            group_label,
            lang_label,
        };
        Ok(Self(LoraAdapter::new(meta, weights).map_err(err)?))
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self(LoraAdapter::from_bytes(data).map_err(err)?))
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self(read_adapter(path).map_err(err)?))
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        write_adapter(&self.0, path).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.to_bytes())
    }

    fn flatten(&self) -> Vec<f32> {
        self.0.flatten()
    }

    fn tensor_names(&self) -> Vec<String> {
        self.0.weights().iter().map(|(n, _)| n.to_string()).collect()
    }

    /// Rows of one tensor.
    fn tensor(&self, name: &str) -> PyResult<Vec<Vec<f32>>> {
        let m = self
            .0
            .weights()
            .get(name)
            .ok_or_else(|| PyValueError::new_err(format!("no tensor `{name}`")))?;
        Ok(m.data().chunks(m.cols()).map(<[f32]>::to_vec).collect())
    }

    #[getter]
    fn task_id(&self) -> String {
        self.0.task_id().to_string()
    }

    #[getter]
    fn rank(&self) -> usize {
        self.0.meta().rank
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.0.meta().alpha
    }

    #[getter]
    fn group_label(&self) -> Option<String> {
        self.0.meta().group_label.clone()
    }

    #[getter]
    fn lang_label(&self) -> Option<String> {
        self.0.meta().lang_label.clone()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("LoraAdapter(task_id={:?}, params={})", self.0.task_id(), self.0.param_count())
    }
}

#[pyclass(name = "AdapterSet", module = "adapter_cluster", frozen)]
struct PyAdapterSet(AdapterSet);

#[pymethods]
impl PyAdapterSet {
    #[new]
    fn new(adapters: Vec<PyAdapter>) -> PyResult<Self> {
        Ok(Self(AdapterSet::new(adapters.into_iter().map(|a| a.0).collect()).map_err(err)?))
    }

    #[staticmethod]
    fn read(dir: PathBuf) -> PyResult<Self> {
        Ok(Self(read_adapter_set(dir).map_err(err)?))
    }

    fn write(&self, dir: PathBuf) -> PyResult<Vec<PathBuf>> {
        write_adapter_set(&self.0, dir).map_err(err)
    }

    fn task_ids(&self) -> Vec<String> {
        self.0.task_ids().into_iter().map(str::to_string).collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __getitem__(&self, i: usize) -> PyResult<PyAdapter> {
        if i >= self.0.len() {
            return Err(PyIndexError::new_err(i));
        }
        Ok(PyAdapter(self.0.get(i).clone()))
    }
}

#[pyclass(name = "MergeConfig", module = "adapter_cluster", frozen, from_py_object)]
#[derive(Clone)]
struct PyMergeConfig(MergeConfig);

#[pymethods]
impl PyMergeConfig {
    #[new]
    #[pyo3(signature = (method="ties", density=0.5, drop_rate=0.0, weights=None, seed=0))]
    fn new(method: &str, density: f64, drop_rate: f64, weights: Option<Vec<f64>>, seed: u64) -> PyResult<Self> {
        let cfg = MergeConfig {
            method: method.parse::<MergeMethod>().map_err(err)?,
            density,
            drop_rate,
            weights,
            seed,
        };
        cfg.validate().map_err(err)?;
        Ok(Self(cfg))
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.0.method.as_str()
    }

    fn __repr__(&self) -> String {
        format!("MergeConfig({})", self.0.canonical_string())
    }
}

#[pyclass(name = "PartitionMap", module = "adapter_cluster", frozen, from_py_object)]
#[derive(Clone)]
struct PyPartition(PartitionMap);

#[pymethods]
impl PyPartition {
    #[new]
    fn new(assignment: Vec<usize>, k: usize) -> PyResult<Self> {
        Ok(Self(PartitionMap::new(assignment, k).map_err(err)?))
    }

    #[getter]
    fn assignment(&self) -> Vec<usize> {
        self.0.assignment().to_vec()
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    fn members(&self, cluster: usize) -> PyResult<Vec<usize>> {
        if cluster >= self.0.k() {
            return Err(PyIndexError::new_err(cluster));
        }
        Ok(self.0.members(cluster))
    }

    fn cluster_sizes(&self) -> Vec<usize> {
        self.0.cluster_sizes()
    }

    fn non_empty_count(&self) -> usize {
        self.0.non_empty_count()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("PartitionMap(k={}, assignment={:?})", self.0.k(), self.0.assignment())
    }
}

#[pyclass(name = "SyntheticTaskModel", module = "adapter_cluster", frozen)]
struct PySynthetic(SyntheticTaskModel);

#[pymethods]
impl PySynthetic {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self(SyntheticTaskModel::load(dir).map_err(err)?))
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.0.save(dir).map_err(err)
    }

    fn with_examples(&self, examples_per_task: usize) -> PyResult<Self> {
        Ok(Self(self.0.with_examples(examples_per_task).map_err(err)?))
    }

    fn evaluate(&self, adapter: &PyAdapter, task_id: &str) -> PyResult<f64> {
        self.0.evaluate(&adapter.0, task_id).map_err(err)
    }

    fn target(&self, task_id: &str) -> PyResult<Vec<f32>> {
        self.0
            .target(task_id)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| PyValueError::new_err(format!("unknown task `{task_id}`")))
    }

    #[getter]
    fn examples_per_task(&self) -> usize {
        self.0.examples_per_task
    }
}

#[pyclass(name = "ExternalOracle", module = "adapter_cluster", frozen)]
struct PyExternal(ExternalOracle);

#[pymethods]
impl PyExternal {
    /// `command` is split with shell word rules; the protocol arguments are appended.
    #[new]
    #[pyo3(signature = (command, examples_per_task=10, timeout=600.0, parallelism=1))]
    fn new(command: &str, examples_per_task: usize, timeout: f64, parallelism: usize) -> PyResult<Self> {
        let timeout = Duration::try_from_secs_f64(timeout).map_err(err)?;
        Ok(Self(
            ExternalOracle::from_command_line(command, examples_per_task)
                .map_err(err)?
                .with_timeout(timeout)
                .with_parallelism(parallelism.max(1)),
        ))
    }

    fn evaluate(&self, adapter: &PyAdapter, task_id: &str) -> PyResult<f64> {
        self.0.evaluate(&adapter.0, task_id).map_err(err)
    }
}

#[derive(FromPyObject)]
enum OracleArg<'py> {
    Synthetic(PyRef<'py, PySynthetic>),
    External(PyRef<'py, PyExternal>),
}

impl OracleArg<'_> {
    fn get(&self) -> &dyn LossOracle {
        match self {
            OracleArg::Synthetic(s) => &s.0,
            OracleArg::External(e) => &e.0,
        }
    }
}

fn merge_cfg(cfg: Option<PyMergeConfig>) -> MergeConfig {
    cfg.map(|c| c.0).unwrap_or_default()
}

fn flat_refs(vectors: &[Vec<f32>]) -> Vec<&[f32]> {
    vectors.iter().map(Vec::as_slice).collect()
}

fn unary(weights: Option<Vec<f64>>, n: usize) -> Vec<f64> {
    weights.unwrap_or_else(|| vec![1.0; n])
}

/// Merges the adapters of one cluster (a single adapter is returned as is).
#[pyfunction]
#[pyo3(signature = (adapters, config=None))]
fn merge(adapters: Vec<PyRef<'_, PyAdapter>>, config: Option<PyMergeConfig>) -> PyResult<PyAdapter> {
    let refs: Vec<&LoraAdapter> = adapters.iter().map(|a| &a.0).collect();
    Ok(PyAdapter(adapter_cluster::merge(&refs, &merge_cfg(config)).map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (vectors, weights=None))]
fn linear_merge(vectors: Vec<Vec<f32>>, weights: Option<Vec<f64>>) -> PyResult<Vec<f32>> {
    linear_impl(&flat_refs(&vectors), &unary(weights, vectors.len())).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (vectors, density, weights=None))]
fn ties_merge(vectors: Vec<Vec<f32>>, density: f64, weights: Option<Vec<f64>>) -> PyResult<Vec<f32>> {
    ties_impl(&flat_refs(&vectors), density, &unary(weights, vectors.len())).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (vectors, drop_rate, seed, weights=None))]
fn dare_merge(vectors: Vec<Vec<f32>>, drop_rate: f64, seed: u64, weights: Option<Vec<f64>>) -> PyResult<Vec<f32>> {
    dare_impl(&flat_refs(&vectors), drop_rate, &unary(weights, vectors.len()), seed).map_err(err)
}

#[pyfunction]
fn random_partition(n: usize, k: usize, seed: u64) -> PyResult<PyPartition> {
    Ok(PyPartition(random_impl(n, k, &mut rng(seed)).map_err(err)?))
}

/// `attribute` is `group_label` or `lang_label`.
#[pyfunction]
fn dirichlet_partition(set: &PyAdapterSet, k: usize, attribute: &str, alpha: f64, seed: u64) -> PyResult<PyPartition> {
    let attribute: Attribute = attribute.parse().map_err(err)?;
    Ok(PyPartition(dirichlet_impl(&set.0, k, attribute, alpha, &mut rng(seed)).map_err(err)?))
}

/// K-Means over flattened weights (`features="flat"`) or SVD similarity rows (`"svd"`).
#[pyfunction]
#[pyo3(signature = (set, k, seed, features="flat", top_k=None, max_iters=100, tol=1e-6))]
fn kmeans(
    set: &PyAdapterSet,
    k: usize,
    seed: u64,
    features: &str,
    top_k: Option<usize>,
    max_iters: usize,
    tol: f64,
) -> PyResult<PyPartition> {
    let f = match features {
        "flat" => features_flat(&set.0),
        "svd" => features_svd(&set.0, top_k.unwrap_or_else(|| default_top_k(set.0.get(0).meta().rank))),
        other => return Err(PyValueError::new_err(format!("unknown features `{other}` (flat or svd)"))),
    }
    .map_err(err)?;
    let opts = KMeansOptions { max_iters, tol };
    Ok(PyPartition(kmeans_impl(&f, k, &mut rng(seed), &opts).map_err(err)?.partition))
}

/// Generates `(AdapterSet, SyntheticTaskModel)` with planted groups.
#[pyfunction]
#[pyo3(signature = (seed, groups=5, adapters=40, layers=2, rank=4, d_in=8, d_out=8, alpha=16.0, center_scale=1.0, noise=0.1, examples_per_task=10, langs=4))]
#[allow(clippy::too_many_arguments)]
fn synthetic_fleet(
    seed: u64,
    groups: usize,
    adapters: usize,
    layers: usize,
    rank: usize,
    d_in: usize,
    d_out: usize,
    alpha: f64,
    center_scale: f64,
    noise: f64,
    examples_per_task: usize,
    langs: usize,
) -> PyResult<(PyAdapterSet, PySynthetic)> {
    let spec = SyntheticSpec {
        groups,
        adapters,
        layers,
        rank,
        d_in,
        d_out,
        alpha,
        center_scale,
        noise,
        examples_per_task,
        langs,
    };
    let (set, model) = synthetic_generate(&spec, &mut rng(seed)).map_err(err)?;
    Ok((PyAdapterSet(set), PySynthetic(model)))
}

fn record_dict<'py>(py: Python<'py>, r: &TraceRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("iter", r.iter)?;
    d.set_item("src_cluster", r.src_cluster)?;
    d.set_item("dst_cluster", r.dst_cluster)?;
    d.set_item("task_id", r.task_id.clone())?;
    d.set_item("loss_src", r.loss_src)?;
    d.set_item("loss_dst", r.loss_dst)?;
    d.set_item("accepted", r.accepted)?;
    Ok(d)
}

/// Runs the data-driven search; returns `(final_partition, initial_partition, trace)`
/// with the trace as a list of dicts.
#[pyfunction]
#[pyo3(signature = (set, oracle, k=5, iters=200, seed=0, config=None))]
fn d2c_run<'py>(
    py: Python<'py>,
    set: &PyAdapterSet,
    oracle: OracleArg<'py>,
    k: usize,
    iters: usize,
    seed: u64,
    config: Option<PyMergeConfig>,
) -> PyResult<(PyPartition, PyPartition, Vec<Bound<'py, PyDict>>)> {
    let cfg = SearchConfig::new(k, iters, seed, merge_cfg(config));
    let (p, trace) = adapter_cluster::d2c_run(&set.0, &oracle.get(), &cfg).map_err(err)?;
    let records = trace.records.iter().map(|r| record_dict(py, r)).collect::<PyResult<_>>()?;
    Ok((PyPartition(p), PyPartition(trace.initial), records))
}

/// Task id, loss, error message.
type TaskLoss = (String, Option<f64>, Option<String>);

/// Per-task losses of a partition as `[(task_id, loss or None, error or None)]`.
#[pyfunction]
#[pyo3(signature = (set, partition, oracle, config=None))]
fn evaluate_partition(
    set: &PyAdapterSet,
    partition: &PyPartition,
    oracle: OracleArg<'_>,
    config: Option<PyMergeConfig>,
) -> PyResult<Vec<TaskLoss>> {
    let ev = adapter_cluster::evaluate_partition(&set.0, &partition.0, &oracle.get(), &merge_cfg(config)).map_err(err)?;
    Ok(ev
        .losses
        .into_iter()
        .map(|(t, l)| match l {
            Ok(v) => (t, Some(v), None),
            Err(e) => (t, None, Some(e)),
        })
        .collect())
}

#[pyfunction]
fn storage_fraction(k_used: usize, n: usize) -> PyResult<f64> {
    adapter_cluster::storage_fraction(k_used, n).map_err(err)
}

#[pyfunction]
fn adjusted_rand_index(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("labelings differ in length"));
    }
    Ok(metrics::adjusted_rand_index(&a, &b))
}

#[pyfunction]
fn purity(clusters: Vec<usize>, labels: Vec<String>) -> PyResult<f64> {
    if clusters.len() != labels.len() {
        return Err(PyValueError::new_err("clusters and labels differ in length"));
    }
    Ok(metrics::purity(&clusters, &labels))
}

#[pymodule(name = "adapter_cluster")]
fn adapter_cluster_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyAdapter>()?;
    m.add_class::<PyAdapterSet>()?;
    m.add_class::<PyMergeConfig>()?;
    m.add_class::<PyPartition>()?;
    m.add_class::<PySynthetic>()?;
    m.add_class::<PyExternal>()?;
    m.add_function(wrap_pyfunction!(merge, m)?)?;
    m.add_function(wrap_pyfunction!(linear_merge, m)?)?;
    m.add_function(wrap_pyfunction!(ties_merge, m)?)?;
    m.add_function(wrap_pyfunction!(dare_merge, m)?)?;
    m.add_function(wrap_pyfunction!(random_partition, m)?)?;
    m.add_function(wrap_pyfunction!(dirichlet_partition, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_fleet, m)?)?;
    m.add_function(wrap_pyfunction!(d2c_run, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_partition, m)?)?;
    m.add_function(wrap_pyfunction!(storage_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(adjusted_rand_index, m)?)?;
    m.add_function(wrap_pyfunction!(purity, m)?)?;
    Ok(())
}
