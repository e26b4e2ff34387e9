//! Python bindings: quantizers, dyadic scales, run configurations, the
//! training pipeline, checkpoints and the integer model.
//!
//! Images cross the boundary as flat lists in `[N, C, H, W]` order.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyOverflowError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use nice_core::analysis;
use nice_core::checkpoint::Checkpoint;
use nice_core::config::{Overrides, RunConfig};
use nice_core::int_infer::{self, IntModel};
use nice_core::pipeline;
use nice_core::quant;
use nice_core::{Error, QuantSpec, Task, Tensor};

fn err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) | Error::Parameter(_) | Error::Range(_) | Error::Dimension(_) => PyValueError::new_err(msg),
        Error::Format(_) | Error::Parse { .. } => PyValueError::new_err(msg),
        Error::Io(_) => PyIOError::new_err(msg),
        Error::Overflow { .. } => PyOverflowError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn tensor(values: Vec<f64>) -> Tensor {
    Tensor::from_vec(values)
}

#[pyclass(name = "QuantSpec", module = "nice", skip_from_py_object)]
#[derive(Clone)]
struct PyQuantSpec {
    inner: QuantSpec,
}

#[pymethods]
impl PyQuantSpec {
    #[new]
    #[pyo3(signature = (bits_w = 4, bits_a = 4, bits_b = 16))]
    fn new(bits_w: u32, bits_a: u32, bits_b: u32) -> PyResult<Self> {
        Ok(Self { inner: QuantSpec::new(bits_w, bits_a, bits_b).map_err(err)? })
    }

    #[getter]
    fn bits_w(&self) -> u32 {
        self.inner.bits_w
    }

    #[getter]
    fn bits_a(&self) -> u32 {
        self.inner.bits_a
    }

    #[getter]
    fn bits_b(&self) -> u32 {
        self.inner.bits_b
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta
    }

    #[getter]
    fn mask_prob(&self) -> f64 {
        self.inner.mask_prob
    }

    fn __repr__(&self) -> String {
        let q = &self.inner;
        format!("QuantSpec(bits_w={}, bits_a={}, bits_b={})", q.bits_w, q.bits_a, q.bits_b)
    }
}

/// Symmetric weight quantization to `bits` with clamp `c_w`.
#[pyfunction]
fn quantize_weights(w: Vec<f64>, c_w: f64, bits: u32) -> PyResult<Vec<f64>> {
    Ok(quant::quantize_weights(&tensor(w), c_w, bits).map_err(err)?.data().to_vec())
}

/// Clamped-ReLU activation quantization to `bits` with clamp `c_a`.
#[pyfunction]
fn quantize_activations(a: Vec<f64>, c_a: f64, bits: u32) -> PyResult<Vec<f64>> {
    Ok(quant::quantize_activations(&tensor(a), c_a, bits).map_err(err)?.data().to_vec())
}

#[pyfunction]
#[pyo3(signature = (w, beta = 3.0))]
fn init_weight_clamp(w: Vec<f64>, beta: f64) -> PyResult<f64> {
    quant::init_weight_clamp(&tensor(w), beta).map_err(err)
}

#[pyfunction]
fn bias_clamp(c_a: f64, c_w: f64, bits_a: u32, bits_w: u32, bits_b: u32) -> PyResult<f64> {
    quant::bias_clamp(c_a, c_w, bits_a, bits_w, bits_b).map_err(err)
}

/// `(q, p)` with `q * 2**p` closest to `s`.
#[pyfunction]
fn decompose_scale(s: f64) -> PyResult<(u32, i32)> {
    let d = int_infer::decompose_scale(s).map_err(err)?;
    Ok((d.q, d.p))
}

/// Chi-square uniformity test of the normalized rounding errors of `w`:
/// `(statistic, df, critical, reject)`.
#[pyfunction]
#[pyo3(signature = (w, c_w, bits, bins = 16, significance = 0.01))]
fn uniformity_test(w: Vec<f64>, c_w: f64, bits: u32, bins: usize, significance: f64) -> PyResult<(f64, usize, f64, bool)> {
    let h = analysis::error_histogram(&tensor(w), c_w, bits, bins).map_err(err)?;
    let u = analysis::uniformity_test(&h, significance).map_err(err)?;
    Ok((u.statistic, u.df, u.critical, u.reject))
}

#[pyclass(name = "RunConfig", module = "nice", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::load(&path).map_err(err)? })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::parse(text).map_err(err)? })
    }

    /// A copy with command-line style overrides applied.
    #[pyo3(signature = (seed = None, subset_size = None, bits_w = None, bits_a = None, bits_b = None))]
    fn with_overrides(
        &self,
        seed: Option<u64>,
        subset_size: Option<usize>,
        bits_w: Option<u32>,
        bits_a: Option<u32>,
        bits_b: Option<u32>,
    ) -> PyResult<Self> {
        let mut inner = self.inner.clone();
        inner
            .apply(&Overrides { seed, out_dir: None, subset_size, bits_w, bits_a, bits_b })
            .map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn task(&self) -> &'static str {
        match self.inner.task {
            Task::Classification => "classification",
            Task::Regression => "regression",
        }
    }

    /// Name of the evaluation metric.
    #[getter]
    fn metric(&self) -> &'static str {
        nice_core::qat::metric_name(self.inner.task)
    }

    #[getter]
    fn quant(&self) -> PyQuantSpec {
        PyQuantSpec { inner: self.inner.quant }
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }
}

#[pyclass(name = "Checkpoint", module = "nice")]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Checkpoint::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        self.inner.to_bytes().map_err(err)
    }

    #[getter]
    fn arch(&self) -> String {
        self.inner.model.arch.name.clone()
    }

    #[getter]
    fn quantized(&self) -> bool {
        self.inner.skip_first_last.is_some()
    }

    #[getter]
    fn act_clamps(&self) -> Vec<Option<f64>> {
        self.inner.model.act_clamps.clone()
    }

    #[getter]
    fn weight_clamps(&self) -> Vec<Option<f64>> {
        self.inner.model.weight_clamps.clone()
    }

    /// `(loss, metric)` on the configuration's evaluation set.
    fn evaluate(&self, py: Python<'_>, config: &PyRunConfig) -> PyResult<(f64, f64)> {
        py.detach(|| {
            let data = pipeline::load_data(&config.inner)?;
            pipeline::evaluate(&self.inner, &data.eval)
        })
        .map_err(err)
    }

    /// Model output for a flat `[N, C, H, W]` batch.
    fn predict(&self, images: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = batch(&self.inner.model.arch.input_shape, images)?;
        let (modes, pinned) = pipeline::eval_modes(&self.inner);
        let y = self.inner.model.predict(x, &modes, &pinned, &self.inner.quant).map_err(err)?;
        Ok(y.data().to_vec())
    }
}

fn batch(shape: &[usize; 3], images: Vec<f64>) -> PyResult<Tensor> {
    let per: usize = shape.iter().product();
    if images.is_empty() || !images.len().is_multiple_of(per) {
        return Err(PyValueError::new_err(format!("{} values is not a whole number of {shape:?} images", images.len())));
    }
    Tensor::new(&[images.len() / per, shape[0], shape[1], shape[2]], images).map_err(err)
}

#[pyclass(name = "IntModel", module = "nice")]
struct PyIntModel {
    inner: IntModel,
}

#[pymethods]
impl PyIntModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: int_infer::read_int_model(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        int_infer::write_int_model(&self.inner, &path).map_err(err)
    }

    fn to_bytes(&self) -> Vec<u8> {
        int_infer::format::to_bytes(&self.inner)
    }

    /// `(name, q, p, exact)` for every rescale factor.
    fn scales(&self) -> Vec<(String, u32, i32, f64)> {
        self.inner.scales().into_iter().map(|(n, d, r)| (n, d.q, d.p, r)).collect()
    }

    /// Integer-only output (dequantized) for a flat `[N, C, H, W]` batch.
    fn predict(&self, images: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = batch(&self.inner.input_shape, images)?;
        Ok(int_infer::int_forward(&self.inner, &x).map_err(err)?.to_real().data().to_vec())
    }
}

/// Full-precision training: `(checkpoint, metrics_tsv)`.
#[pyfunction]
fn train(py: Python<'_>, config: &PyRunConfig) -> PyResult<(PyCheckpoint, String)> {
    let (ck, log) = py
        .detach(|| {
            let data = pipeline::load_data(&config.inner)?;
            pipeline::run_train(&config.inner, &data)
        })
        .map_err(err)?;
    Ok((PyCheckpoint { inner: ck }, log.to_tsv()))
}

/// NICE fine-tuning of a full-precision checkpoint: `(checkpoint, metrics_tsv)`.
#[pyfunction]
#[pyo3(signature = (config, checkpoint, noise_gradual = true, clamp_learning = true))]
fn quantize(
    py: Python<'_>,
    config: &PyRunConfig,
    checkpoint: &PyCheckpoint,
    noise_gradual: bool,
    clamp_learning: bool,
) -> PyResult<(PyCheckpoint, String)> {
    let (ck, log) = py
        .detach(|| {
            let data = pipeline::load_data(&config.inner)?;
            pipeline::run_quantize(&config.inner, &checkpoint.inner, &data, noise_gradual, clamp_learning)
        })
        .map_err(err)?;
    Ok((PyCheckpoint { inner: ck }, log.to_tsv()))
}

#[pyfunction]
fn export_int(checkpoint: &PyCheckpoint) -> PyResult<PyIntModel> {
    Ok(PyIntModel { inner: pipeline::export_int(&checkpoint.inner).map_err(err)? })
}

/// Compares the integer model with the fake-quant float model on the
/// configuration's evaluation set; returns a summary dict.
#[pyfunction]
#[pyo3(signature = (checkpoint, int_model, config, samples = None))]
fn verify_int<'py>(
    py: Python<'py>,
    checkpoint: &PyCheckpoint,
    int_model: &PyIntModel,
    config: &PyRunConfig,
    samples: Option<usize>,
) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let rep = py
        .detach(|| {
            let data = pipeline::load_data(&config.inner)?;
            let eval = samples.map_or(data.eval.clone(), |n| data.eval.take(n));
            pipeline::verify_int(&checkpoint.inner, &int_model.inner, &eval)
        })
        .map_err(err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("samples", rep.samples)?;
    d.set_item("max_code_deviation", rep.max_code_dev())?;
    d.set_item("max_propagated_code_deviation", rep.max_propagated_code_dev())?;
    d.set_item("argmax_agreement", rep.argmax_agreement)?;
    d.set_item("metric_float", rep.metric_float)?;
    d.set_item("metric_int", rep.metric_int)?;
    d.set_item("scale_flags", rep.scale_flags.clone())?;
    d.set_item("report", rep.to_tsv())?;
    Ok(d)
}

#[pymodule]
pub fn nice(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyQuantSpec>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyIntModel>()?;
    m.add_function(wrap_pyfunction!(quantize_weights, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_activations, m)?)?;
    m.add_function(wrap_pyfunction!(init_weight_clamp, m)?)?;
    m.add_function(wrap_pyfunction!(bias_clamp, m)?)?;
    m.add_function(wrap_pyfunction!(decompose_scale, m)?)?;
    m.add_function(wrap_pyfunction!(uniformity_test, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(export_int, m)?)?;
    m.add_function(wrap_pyfunction!(verify_int, m)?)?;
    Ok(())
}
