//! Python bindings: quantizer primitives, schedules, the synthetic dataset,
//! and the end-to-end train/quantize pipeline driven by a JSON config.

use pfcr_core::harness::{
    evaluate_top1, load_checkpoint, load_dataset, make_synthetic, quantize_run, save_checkpoint,
    train_baseline, write_curves_csv, RunConfig,
};
use pfcr_core::quant::{QuantSpec, Quantizer};
use pfcr_core::recon;
use pfcr_core::tensor::Tensor;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use std::path::{Path, PathBuf};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Coarsest reconstruction granularity level for an `depth`-block model.
#[pyfunction]
fn compute_g(depth: usize) -> PyResult<u32> {
    recon::compute_g(depth).map_err(value_err)
}

/// Per-level learning rate `lr0 * (1 - 0.2 g)`; raises on level >= 5.
#[pyfunction]
fn lr_for(g: u32, lr0: f64) -> PyResult<f64> {
    pfcr_core::pos::lr_for(g, lr0).map_err(value_err)
}

/// Per-level iteration budget `round(iter0 * (1 + 0.2 g))`.
#[pyfunction]
fn iter_for(g: u32, iter0: usize) -> usize {
    pfcr_core::pos::iter_for(g, iter0)
}

/// Cosine annealing from `lr_base` at step 0 to zero at `total`.
#[pyfunction]
fn cosine_lr(step: usize, total: usize, lr_base: f64) -> f64 {
    pfcr_core::tensor::cosine_lr(step, total, lr_base)
}

/// Uniform or log2 fake-quantizer over a flat list of values (per-layer).
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct PyQuantizer {
    inner: Quantizer<f32>,
}

#[pymethods]
impl PyQuantizer {
    /// Min/max-calibrated uniform quantizer.
    #[staticmethod]
    fn calibrate_uniform(values: Vec<f32>, bits: u32) -> PyResult<Self> {
        let t = Tensor::new(vec![values.len()], values);
        let inner = Quantizer::calibrated(QuantSpec::activation(bits), &t).map_err(value_err)?;
        Ok(PyQuantizer { inner })
    }

    /// Max-calibrated power-of-two quantizer for non-negative inputs.
    #[staticmethod]
    fn calibrate_log2(values: Vec<f32>, bits: u32) -> PyResult<Self> {
        let t = Tensor::new(vec![values.len()], values);
        let inner = Quantizer::calibrated(QuantSpec::post_softmax(bits), &t).map_err(value_err)?;
        Ok(PyQuantizer { inner })
    }

    #[getter]
    fn scale(&self) -> f32 {
        self.inner.params.scale[0]
    }

    #[getter]
    fn zero_point(&self) -> Option<f32> {
        self.inner.params.zero_point.first().copied()
    }

    #[getter]
    fn bits(&self) -> u32 {
        self.inner.spec.bits
    }

    fn quantize(&self, values: Vec<f32>) -> Vec<f32> {
        self.inner.quantize(&Tensor::new(vec![values.len()], values)).data
    }

    fn dequantize(&self, codes: Vec<f32>) -> Vec<f32> {
        self.inner.dequantize(&Tensor::new(vec![codes.len()], codes)).data
    }

    fn fake_quant(&self, values: Vec<f32>) -> Vec<f32> {
        self.inner.fake_quant_value(&Tensor::new(vec![values.len()], values)).data
    }
}

/// Deterministic class-conditional blob dataset. Returns
/// `(images, shape, labels)` with images flattened row-major.
#[pyfunction]
#[pyo3(signature = (num_classes, n, image_size, seed, noise = 0.25))]
fn synthetic_dataset(
    num_classes: usize,
    n: usize,
    image_size: usize,
    seed: u64,
    noise: f64,
) -> (Vec<f32>, Vec<usize>, Vec<usize>) {
    let ds = make_synthetic(num_classes, n, image_size, seed, noise);
    (ds.images.data, ds.images.shape, ds.labels)
}

fn parse_config(config_json: &str) -> PyResult<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(config_json).map_err(value_err)?;
    cfg.model.validate().map_err(value_err)?;
    Ok(cfg)
}

/// Trains the full-precision baseline from a run-config JSON document and
/// writes its checkpoint under `out_dir`. Returns the eval top-1 accuracy.
#[pyfunction]
fn train_baseline_to(config_json: &str, out_dir: &str) -> PyResult<f64> {
    let cfg = parse_config(config_json)?;
    let data = load_dataset(&cfg.dataset, &cfg.model).map_err(runtime_err)?;
    let (model, acc) = train_baseline(
        &cfg.model,
        &data.train,
        &data.eval,
        cfg.baseline.epochs,
        cfg.baseline.lr,
        cfg.baseline.batch,
        cfg.baseline.seed,
    )
    .map_err(runtime_err)?;
    std::fs::create_dir_all(out_dir).map_err(runtime_err)?;
    save_checkpoint(&model, &PathBuf::from(out_dir).join("baseline")).map_err(runtime_err)?;
    Ok(acc)
}

/// Runs the configured quantization method against the baseline checkpoint
/// named in the config (or `out_dir`/baseline), writes the quantized
/// checkpoint, report.json, and curves.csv, and returns the report as JSON.
#[pyfunction]
fn quantize_to(config_json: &str, out_dir: &str) -> PyResult<String> {
    let mut cfg = parse_config(config_json)?;
    let out = PathBuf::from(out_dir);
    if cfg.baseline.checkpoint.is_none() {
        cfg.baseline.checkpoint = Some(out.join("baseline"));
    }
    let base = cfg.baseline.checkpoint.clone().unwrap();
    let baseline = load_checkpoint(&base).map_err(runtime_err)?;
    let data = load_dataset(&cfg.dataset, &cfg.model).map_err(runtime_err)?;
    let outcome = quantize_run(&cfg, &baseline, &data, vec![]).map_err(runtime_err)?;
    std::fs::create_dir_all(&out).map_err(runtime_err)?;
    outcome.report.save(&out.join("report.json")).map_err(runtime_err)?;
    write_curves_csv(&out.join("curves.csv"), &outcome.report.stages).map_err(runtime_err)?;
    if let Some(model) = &outcome.model {
        save_checkpoint(model, &out.join("quantized")).map_err(runtime_err)?;
    }
    serde_json::to_string(&outcome.report).map_err(runtime_err)
}

/// Top-1 accuracy of a saved checkpoint on the config's eval split.
#[pyfunction]
fn evaluate_checkpoint(config_json: &str, checkpoint_base: &str) -> PyResult<f64> {
    let cfg = parse_config(config_json)?;
    let model = load_checkpoint(Path::new(checkpoint_base)).map_err(runtime_err)?;
    let data = load_dataset(&cfg.dataset, &model.config).map_err(runtime_err)?;
    Ok(evaluate_top1(&model, &data.eval))
}

#[pymodule]
fn pfcr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(compute_g, m)?)?;
    m.add_function(wrap_pyfunction!(lr_for, m)?)?;
    m.add_function(wrap_pyfunction!(iter_for, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_baseline_to, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_to, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    m.add_class::<PyQuantizer>()?;
    Ok(())
}
