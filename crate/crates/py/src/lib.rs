//! Python access to model construction, inference, EDF parsing and the
//! evaluation metrics.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use salientsleep::edf::{parse_edf_bytes, EdfRecording};
use salientsleep::metrics::{confusion_matrix, MetricsReport};
use salientsleep::model::{self as core_model, ModelConfig, ModelParams, Variant};
use salientsleep::{synthetic, Error, Shape, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn config(variant: &str, scale: &str) -> PyResult<ModelConfig> {
    let v: Variant = variant.parse().map_err(py_err)?;
    let cfg = match scale {
        "full" => ModelConfig::default(),
        "small" => ModelConfig::small(),
        "toy" => ModelConfig::toy(),
        other => return Err(PyValueError::new_err(format!("unknown scale {other:?}; expected full, small or toy"))),
    };
    Ok(cfg.with_variant(v))
}

/// Trainable parameters per module for a model variant.
#[pyfunction]
#[pyo3(signature = (variant = "full", scale = "full"))]
fn count_parameters<'py>(py: Python<'py>, variant: &str, scale: &str) -> PyResult<Bound<'py, PyDict>> {
    let model = core_model::Model::new(config(variant, scale)?).map_err(py_err)?;
    let count = model.count_parameters();
    let d = PyDict::new(py);
    d.set_item("total", count.total)?;
    let modules = PyDict::new(py);
    for (name, n) in &count.modules {
        modules.set_item(name, n)?;
    }
    d.set_item("modules", modules)?;
    Ok(d)
}

/// A two-stream sleep staging model with its parameters.
#[pyclass(name = "Model")]
struct PyModel {
    model: core_model::Model,
    params: ModelParams<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (variant = "full", scale = "full", seed = 0))]
    fn new(variant: &str, scale: &str, seed: u64) -> PyResult<Self> {
        let model = core_model::Model::new(config(variant, scale)?).map_err(py_err)?;
        let params = model.init_params(seed);
        Ok(PyModel { model, params })
    }

    /// Builds the model and loads weights saved by the training CLI.
    #[staticmethod]
    #[pyo3(signature = (path, variant = "full", scale = "full"))]
    fn load(path: &str, variant: &str, scale: &str) -> PyResult<Self> {
        let model = core_model::Model::new(config(variant, scale)?).map_err(py_err)?;
        let params = core_model::load_checkpoint(path, &model).map_err(py_err)?;
        Ok(PyModel { model, params })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        core_model::save_checkpoint(path, &self.params).map_err(py_err)
    }

    #[getter]
    fn seq_len(&self) -> usize {
        self.model.cfg.seq_len
    }

    #[getter]
    fn epoch_len(&self) -> usize {
        self.model.cfg.epoch_len
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.model.count_parameters().total
    }

    /// Class probabilities, (batch, seq_len, 5), for input shaped
    /// (batch, seq_len * epoch_len, 2) with EEG then EOG in the last axis.
    fn predict(&mut self, x: Vec<Vec<[f32; 2]>>) -> PyResult<Vec<Vec<Vec<f32>>>> {
        let batch = x.len();
        let len = x.first().map_or(0, Vec::len);
        if x.iter().any(|r| r.len() != len) {
            return Err(PyValueError::new_err("every batch item needs the same length"));
        }
        let data: Vec<f32> = x.into_iter().flatten().flatten().collect();
        let input = Tensor::new(Shape::new(batch, len, 2), data).map_err(py_err)?;
        let probs = self.model.predict(&mut self.params, input).map_err(py_err)?;
        let classes = probs.shape().channels;
        let seq_len = self.model.cfg.seq_len;
        Ok(probs
            .data()
            .chunks(seq_len * classes)
            .map(|item| item.chunks(classes).map(<[f32]>::to_vec).collect())
            .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(variant={:?}, seq_len={}, parameters={})",
            self.model.cfg.variant.to_string(),
            self.model.cfg.seq_len,
            self.parameter_count()
        )
    }
}

fn recording_dict<'py>(py: Python<'py>, rec: &EdfRecording) -> PyResult<Bound<'py, PyDict>> {
    let h = &rec.header;
    let d = PyDict::new(py);
    d.set_item("patient", &h.patient)?;
    d.set_item("recording", &h.recording)?;
    d.set_item("start_date", &h.start_date)?;
    d.set_item("start_time", &h.start_time)?;
    d.set_item("edf_plus", h.is_edf_plus())?;
    d.set_item("data_records", h.data_records)?;
    d.set_item("record_duration", h.record_duration)?;
    let signals = PyDict::new(py);
    for (s, samples) in h.signals.iter().zip(&rec.samples) {
        if s.is_annotation() {
            continue;
        }
        let sig = PyDict::new(py);
        sig.set_item("sample_rate", s.sample_rate(h.record_duration))?;
        sig.set_item("physical_dimension", &s.physical_dimension)?;
        sig.set_item("samples", samples)?;
        signals.set_item(&s.label, sig)?;
    }
    d.set_item("signals", signals)?;
    let notes: Vec<(f64, Option<f64>, String)> = rec
        .annotations
        .iter()
        .map(|a| (a.onset, a.duration, a.text.clone()))
        .collect();
    d.set_item("annotations", notes)?;
    Ok(d)
}

/// Parses EDF or EDF+ bytes into header fields, physical samples per signal
/// and annotations as (onset, duration, text).
#[pyfunction]
fn parse_edf<'py>(py: Python<'py>, data: &[u8]) -> PyResult<Bound<'py, PyDict>> {
    let rec = parse_edf_bytes(data).map_err(py_err)?;
    recording_dict(py, &rec)
}

/// Confusion matrix indexed [true][predicted] over the five stages.
#[pyfunction]
fn confusion(predictions: Vec<usize>, labels: Vec<usize>) -> PyResult<Vec<Vec<u64>>> {
    let m = confusion_matrix(&predictions, &labels).map_err(py_err)?;
    Ok(m.iter().map(|r| r.to_vec()).collect())
}

/// Accuracy, macro F1 and per-stage F1 (None for stages never seen).
#[pyfunction]
fn scores<'py>(py: Python<'py>, predictions: Vec<usize>, labels: Vec<usize>) -> PyResult<Bound<'py, PyDict>> {
    let r = MetricsReport::from_predictions(&predictions, &labels).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("macro_f1", r.macro_f1)?;
    let per = PyDict::new(py);
    for (name, f1) in salientsleep::ingest::STAGE_NAMES.iter().zip(r.per_class_f1.as_array()) {
        per.set_item(*name, f1)?;
    }
    d.set_item("per_class_f1", per)?;
    d.set_item("epochs", r.n_epochs_evaluated)?;
    Ok(d)
}

/// A plausible stage sequence of `epochs` labels in 0..5.
#[pyfunction]
#[pyo3(signature = (epochs, seed = 0))]
fn synthetic_hypnogram(epochs: usize, seed: u64) -> Vec<u8> {
    synthetic::hypnogram(epochs, seed)
}

/// PSG and hypnogram EDF bytes whose signals follow `labels`.
#[pyfunction]
#[pyo3(signature = (labels, seed = 0))]
fn synthetic_edf_pair<'py>(py: Python<'py>, labels: Vec<u8>, seed: u64) -> PyResult<(Bound<'py, PyBytes>, Bound<'py, PyBytes>)> {
    let (psg, hyp) = synthetic::edf_pair(&labels, seed).map_err(py_err)?;
    Ok((PyBytes::new(py, &psg), PyBytes::new(py, &hyp)))
}

#[pymodule]
fn salientsleep_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(count_parameters, m)?)?;
    m.add_function(wrap_pyfunction!(parse_edf, m)?)?;
    m.add_function(wrap_pyfunction!(confusion, m)?)?;
    m.add_function(wrap_pyfunction!(scores, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_hypnogram, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_edf_pair, m)?)?;
    m.add("STAGES", salientsleep::ingest::STAGE_NAMES.to_vec())?;
    Ok(())
}
