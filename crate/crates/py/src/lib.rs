//! Python bindings. Tensors cross the boundary as `(shape, flat list)`;
//! structured results come back as plain dicts and lists.

use std::path::PathBuf;

use dpclip::bench::{self, BenchSpec, DataSource, ModelKind};
use dpclip::clipping::{self, ClipConfig, Strategy};
use dpclip::data::{self, SynthKind};
use dpclip::privacy::{self, NoiseSpec, DEFAULT_ALPHAS};
use dpclip::trainer::{self, TrainConfig};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

fn py_err(e: dpclip::Error) -> PyErr {
    match e {
        dpclip::Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = dpclip::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => {
            let list = PyList::empty(py);
            for x in a {
                list.append(to_py(py, x)?)?;
            }
            list.into_any()
        }
        Value::Object(m) => {
            let dict = PyDict::new(py);
            for (k, x) in m {
                dict.set_item(k, to_py(py, x)?)?;
            }
            dict.into_any()
        }
    })
}

fn serialized<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let value = serde_json::to_value(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &value)
}

/// Dense row-major float64 array.
#[pyclass(name = "Tensor", module = "dpclip", from_py_object)]
#[derive(Clone)]
pub struct PyTensor(pub dpclip::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        dpclip::Tensor::new(shape, data).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self(dpclip::Tensor::zeros(&shape))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        self.0.reshape(&shape).map(Self).map_err(py_err)
    }

    fn norm(&self) -> f64 {
        self.0.norm()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

/// A labelled dataset of equally shaped records.
#[pyclass(name = "Dataset", module = "dpclip")]
pub struct PyDataset(pub data::Dataset);

#[pymethods]
impl PyDataset {
    #[getter]
    fn features(&self) -> PyTensor {
        PyTensor(self.0.features.clone())
    }

    #[getter]
    fn targets(&self) -> Vec<usize> {
        self.0.targets.clone()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(len={}, record_shape={:?}, classes={})",
            self.0.len(),
            self.0.record_shape(),
            self.0.num_classes
        )
    }
}

/// A sequential classifier; build one with `reference_model`.
#[pyclass(name = "Model", module = "dpclip")]
pub struct PyModel(pub dpclip::model::Model);

#[pymethods]
impl PyModel {
    #[getter]
    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    #[getter]
    fn param_names(&self) -> Vec<String> {
        self.0.params.iter().map(|p| p.name.clone()).collect()
    }

    fn flat_params(&self) -> Vec<f64> {
        self.0.flat_params()
    }

    /// Per-record gradient norms from the fast closed forms.
    fn per_example_norms(&self, x: &PyTensor, targets: Vec<usize>) -> PyResult<Vec<f64>> {
        clipping::fast_per_example_norms(&self.0, &x.0, &targets).map(|t| t.data().to_vec()).map_err(py_err)
    }

    /// Per-record norms from one backward pass per record.
    fn naive_per_example_norms(&self, x: &PyTensor, targets: Vec<usize>) -> PyResult<Vec<f64>> {
        let per = clipping::naive_per_example_gradients(&self.0, &x.0, &targets).map_err(py_err)?;
        Ok(per.iter().map(|g| g.iter().map(dpclip::Tensor::sq_norm).sum::<f64>().sqrt()).collect())
    }

    /// Mean clipped gradient, one tensor per parameter.
    #[pyo3(signature = (x, targets, clip=1.0, method="reweight"))]
    fn clipped_gradient(&self, x: &PyTensor, targets: Vec<usize>, clip: f64, method: &str) -> PyResult<Vec<PyTensor>> {
        let cfg = ClipConfig::new(clip, parse::<Strategy>(method)?).map_err(py_err)?;
        let bg = clipping::clipped_batch_gradient(&self.0, &x.0, &targets, &cfg).map_err(py_err)?;
        Ok(bg.grads.into_iter().map(PyTensor).collect())
    }

    /// `(accuracy, mean loss)` over `ds`.
    fn evaluate(&self, ds: &PyDataset) -> PyResult<(f64, f64)> {
        trainer::evaluate(&self.0, &ds.0).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Model(params={}, classes={})", self.0.param_count(), self.0.num_classes)
    }
}

/// Accumulated Rényi DP of a sequence of Gaussian releases.
#[pyclass(name = "RdpLedger", module = "dpclip")]
pub struct PyLedger(privacy::RdpLedger);

#[pymethods]
impl PyLedger {
    #[new]
    #[pyo3(signature = (alphas=None))]
    fn new(alphas: Option<Vec<f64>>) -> PyResult<Self> {
        privacy::RdpLedger::new(alphas.as_deref().unwrap_or(&DEFAULT_ALPHAS)).map(Self).map_err(py_err)
    }

    /// Records one step with noise std `sigma` on the mean of `tau`
    /// gradients clipped to `c`.
    fn compose_gaussian(&mut self, sigma: f64, c: f64, tau: usize) -> PyResult<()> {
        self.0.compose_gaussian(&NoiseSpec { sigma, c, tau }).map_err(py_err)
    }

    /// Records one step given its ε per order, in grid order.
    fn compose(&mut self, eps: Vec<f64>) -> PyResult<()> {
        let step: Vec<(f64, f64)> = self.0.alphas().iter().copied().zip(eps).collect();
        self.0.compose(&step).map_err(py_err)
    }

    /// `(ε′, best order)` at `delta`.
    fn to_dp(&self, delta: f64) -> PyResult<(f64, f64)> {
        self.0.to_dp(delta).map_err(py_err)
    }

    #[getter]
    fn alphas(&self) -> Vec<f64> {
        self.0.alphas().to_vec()
    }

    #[getter]
    fn eps(&self) -> Vec<f64> {
        self.0.eps().to_vec()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.steps()
    }
}

#[pyfunction]
fn gaussian_rdp_eps(sigma: f64, sensitivity: f64, alpha: f64) -> PyResult<f64> {
    privacy::gaussian_rdp_eps(sigma, sensitivity, alpha).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (eps, delta, steps, sensitivity, alphas=None))]
fn calibrate_sigma(eps: f64, delta: f64, steps: usize, sensitivity: f64, alphas: Option<Vec<f64>>) -> PyResult<f64> {
    privacy::calibrate_sigma(eps, delta, steps, sensitivity, alphas.as_deref().unwrap_or(&DEFAULT_ALPHAS))
        .map_err(py_err)
}

#[pyfunction]
fn clip(g: &PyTensor, c: f64) -> PyTensor {
    PyTensor(clipping::clip(&g.0, c))
}

#[pyfunction]
#[pyo3(signature = (kind, n, record_shape, classes=2, seed=0))]
fn synth(kind: &str, n: usize, record_shape: Vec<usize>, classes: usize, seed: u64) -> PyResult<PyDataset> {
    data::synth(parse::<SynthKind>(kind)?, n, &record_shape, classes, seed).map(PyDataset).map_err(py_err)
}

#[pyfunction]
fn load_idx(images: PathBuf, labels: PathBuf) -> PyResult<PyDataset> {
    data::load_idx(&images, &labels).map(PyDataset).map_err(py_err)
}

#[pyfunction]
fn idx_from_bytes(images: &[u8], labels: &[u8]) -> PyResult<PyDataset> {
    data::idx_from_bytes(images, labels).map(PyDataset).map_err(py_err)
}

/// Benchmark data for a reference model (`mlp`, `cnn`, `rnn`, `lstm`,
/// `transformer`).
#[pyfunction]
#[pyo3(signature = (model, records, seed=42))]
fn bench_dataset(model: &str, records: usize, seed: u64) -> PyResult<PyDataset> {
    bench::bench_dataset(parse(model)?, &DataSource::Synthetic, records, seed).map(PyDataset).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (kind, record_shape, classes, depth=2, seed=0))]
fn reference_model(kind: &str, record_shape: Vec<usize>, classes: usize, depth: usize, seed: u64) -> PyResult<PyModel> {
    bench::build_reference_model(parse::<ModelKind>(kind)?, depth, &record_shape, classes, seed)
        .map(PyModel)
        .map_err(py_err)
}

/// Trains `model` in place. Keyword arguments are training-config fields
/// (`epochs`, `batch_size`, `clip`, `sigma`, `method`, `noise_scale`, ...).
/// Returns per-epoch metrics and the privacy report.
#[pyfunction]
#[pyo3(signature = (model, dataset, **config))]
fn train<'py>(
    py: Python<'py>,
    model: &mut PyModel,
    dataset: &PyDataset,
    config: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = match config {
        Some(d) => {
            let text: String = py.import("json")?.call_method1("dumps", (d,))?.extract()?;
            TrainConfig::from_json(&text).map_err(py_err)?
        }
        None => TrainConfig::default(),
    };
    let out = py.detach(|| trainer::train(&mut model.0, &dataset.0, &cfg)).map_err(py_err)?;
    let result = PyDict::new(py);
    result.set_item("metrics", serialized(py, &out.metrics)?)?;
    result.set_item("privacy", serialized(py, &out.privacy_report().map_err(py_err)?)?)?;
    result.set_item("config", serialized(py, &out.config)?)?;
    Ok(result)
}

/// Runs one benchmark grid and returns its rows.
#[pyfunction]
#[pyo3(signature = (model, methods=None, batch_sizes=None, records=2000, epochs=5, warmup=1, depth=2, threads=0, seed=42))]
#[allow(clippy::too_many_arguments)]
fn run_bench<'py>(
    py: Python<'py>,
    model: &str,
    methods: Option<Vec<String>>,
    batch_sizes: Option<Vec<usize>>,
    records: usize,
    epochs: usize,
    warmup: usize,
    depth: usize,
    threads: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let mut spec = BenchSpec::new(parse(model)?);
    if let Some(m) = methods {
        spec.methods = m.iter().map(|s| parse(s)).collect::<PyResult<_>>()?;
    }
    if let Some(b) = batch_sizes {
        spec.batch_sizes = b;
    }
    spec = BenchSpec { records, epochs, warmup, depth, threads, seed, ..spec };
    let rows = py.detach(|| bench::run_bench(&spec)).map_err(py_err)?;
    serialized(py, &rows)
}

#[pymodule]
#[pyo3(name = "dpclip")]
fn dpclip_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}

/// Adds every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyLedger>()?;
    m.add_function(wrap_pyfunction!(gaussian_rdp_eps, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(clip, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(load_idx, m)?)?;
    m.add_function(wrap_pyfunction!(idx_from_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(bench_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(reference_model, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    m.add("DEFAULT_ALPHAS", DEFAULT_ALPHAS.to_vec())?;
    Ok(())
}
