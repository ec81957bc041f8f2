//! Python bindings. Images and masks cross the boundary as flat row-major
//! lists together with their height and width.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use refseg_core::data::Split;
use refseg_core::experiment::{self, ExperimentConfig};
use refseg_core::image::{GrayImage, LabelMask};
use refseg_core::segmenter::{self, SegmenterConfig, SegmenterState, SpatialPrompt};
use refseg_core::ssl::{self, ScheduleKind, StudentNet};
use refseg_core::templatebank::{self, compute_descriptor};
use refseg_core::{metrics, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::InvalidArgument(_) | Error::Shape(_) | Error::Raster(_) | Error::Manifest(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn image(h: usize, w: usize, pixels: Vec<f64>) -> PyResult<GrayImage> {
    GrayImage::new(h, w, pixels).map_err(to_py)
}

fn mask(h: usize, w: usize, classes: u8, labels: Vec<u8>) -> PyResult<LabelMask> {
    LabelMask::new(h, w, classes, labels).map_err(to_py)
}

fn config(json: Option<&str>) -> PyResult<ExperimentConfig> {
    let cfg = match json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Default experiment configuration as JSON.
#[pyfunction]
fn default_config() -> String {
    serde_json::to_string_pretty(&ExperimentConfig::default()).expect("config serializes")
}

/// Writes the synthetic corpus described by `config` and returns the
/// manifest path.
#[pyfunction]
#[pyo3(signature = (config_json=None, seed=1))]
fn generate(config_json: Option<&str>, seed: u64) -> PyResult<String> {
    let cfg = config(config_json)?;
    experiment::generate(&cfg, seed).map_err(to_py)?;
    Ok(cfg.dataset_root.join(refseg_core::data::MANIFEST_FILE).display().to_string())
}

/// Stage 1; returns (checkpoint path, held-out mean Dice).
#[pyfunction]
#[pyo3(signature = (config_json=None, seed=1))]
fn pretrain(config_json: Option<&str>, seed: u64) -> PyResult<(String, f64)> {
    let cfg = config(config_json)?;
    let out = experiment::pretrain(&cfg, seed).map_err(to_py)?;
    Ok((out.checkpoint.display().to_string(), out.report.mean_dice))
}

/// Stage 2; returns the final test mean Dice.
#[pyfunction]
#[pyo3(signature = (config_json=None, seed=1, segmenter=None))]
fn ssl_train(config_json: Option<&str>, seed: u64, segmenter: Option<PathBuf>) -> PyResult<Option<f64>> {
    let cfg = config(config_json)?;
    let r = experiment::ssl_train(&cfg, seed, segmenter.as_deref()).map_err(to_py)?;
    Ok(r.final_report().map(|rep| rep.mean_dice))
}

/// Test-split metrics CSV for a checkpoint.
#[pyfunction]
#[pyo3(signature = (checkpoint, config_json=None, seed=1))]
fn evaluate(checkpoint: PathBuf, config_json: Option<&str>, seed: u64) -> PyResult<String> {
    let cfg = config(config_json)?;
    let rep = experiment::eval(&cfg, seed, Some(&checkpoint), None).map_err(to_py)?;
    rep.to_csv_string(Some(&cfg.header(seed))).map_err(to_py)
}

/// The ablation grid as CSV text.
#[pyfunction]
#[pyo3(signature = (config_json=None))]
fn ablate(config_json: Option<&str>) -> PyResult<String> {
    let cfg = config(config_json)?;
    experiment::ablate(&cfg).and_then(|t| t.to_csv_string()).map_err(to_py)
}

#[pyfunction]
fn dice(h: usize, w: usize, classes: u8, pred: Vec<u8>, truth: Vec<u8>, class_id: u8) -> PyResult<f64> {
    metrics::dice(&mask(h, w, classes, pred)?, &mask(h, w, classes, truth)?, class_id).map_err(to_py)
}

#[pyfunction]
fn iou(h: usize, w: usize, classes: u8, pred: Vec<u8>, truth: Vec<u8>, class_id: u8) -> PyResult<f64> {
    metrics::iou(&mask(h, w, classes, pred)?, &mask(h, w, classes, truth)?, class_id).map_err(to_py)
}

/// `None` when either mask lacks the class.
#[pyfunction]
fn hd95(h: usize, w: usize, classes: u8, pred: Vec<u8>, truth: Vec<u8>, class_id: u8) -> PyResult<Option<f64>> {
    metrics::hd95(&mask(h, w, classes, pred)?, &mask(h, w, classes, truth)?, class_id).map_err(to_py)
}

/// `(alpha_t, alpha_v)` at iteration `t` of `total`.
#[pyfunction]
fn schedule(t: usize, total: usize) -> (f64, f64) {
    let s = ssl::schedule(t, total, ScheduleKind::Cosine);
    (s.alpha_t, s.alpha_v)
}

#[pyfunction]
fn descriptor(h: usize, w: usize, pixels: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(compute_descriptor(&image(h, w, pixels)?).as_slice().to_vec())
}

#[pyclass(name = "TemplateBank")]
struct PyTemplateBank {
    inner: templatebank::TemplateBank,
}

#[pymethods]
impl PyTemplateBank {
    #[new]
    #[pyo3(signature = (temperature=0.1))]
    fn new(temperature: f64) -> PyResult<Self> {
        Ok(Self {
            inner: templatebank::TemplateBank::new(temperature).map_err(to_py)?,
        })
    }

    /// Every labeled slice of the corpus at `dataset_root`.
    #[staticmethod]
    #[pyo3(signature = (dataset_root, temperature=0.1))]
    fn from_dataset(dataset_root: PathBuf, temperature: f64) -> PyResult<Self> {
        let m = refseg_core::data::load_manifest(&dataset_root).map_err(to_py)?;
        Ok(Self {
            inner: templatebank::TemplateBank::from_split(&m, Split::Labeled, temperature).map_err(to_py)?,
        })
    }

    fn insert(&mut self, h: usize, w: usize, classes: u8, pixels: Vec<f64>, labels: Vec<u8>, patient: &str) -> PyResult<usize> {
        self.inner
            .insert(image(h, w, pixels)?, mask(h, w, classes, labels)?, patient)
            .map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `[(index, similarity)]`, most similar first.
    #[pyo3(signature = (h, w, pixels, k, class_id=None))]
    fn top_k(&self, h: usize, w: usize, pixels: Vec<f64>, k: usize, class_id: Option<u8>) -> PyResult<Vec<(usize, f64)>> {
        let q = compute_descriptor(&image(h, w, pixels)?);
        self.inner.top_k(&q, k, class_id).map_err(to_py)
    }

    /// `(chosen index, candidate indices, probabilities)`.
    #[pyo3(signature = (h, w, pixels, class_id, seed))]
    fn sample(&self, h: usize, w: usize, pixels: Vec<f64>, class_id: Option<u8>, seed: u64) -> PyResult<(usize, Vec<usize>, Vec<f64>)> {
        let q = compute_descriptor(&image(h, w, pixels)?);
        let d = self.inner.sample(&q, class_id, seed).map_err(to_py)?;
        Ok((d.chosen, d.candidates, d.probabilities))
    }
}

#[pyclass(name = "Segmenter")]
struct PySegmenter {
    state: SegmenterState,
    config: SegmenterConfig,
}

#[pymethods]
impl PySegmenter {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (state, config, _) = SegmenterState::load(&path).map_err(to_py)?;
        Ok(Self { state, config })
    }

    #[getter]
    fn num_classes(&self) -> u8 {
        self.config.num_classes
    }

    /// Foreground probabilities for `class_id`, with a template drawn from
    /// `bank`.
    fn predict(&self, h: usize, w: usize, pixels: Vec<f64>, bank: &PyTemplateBank, class_id: u8, seed: u64) -> PyResult<Vec<f64>> {
        let img = image(h, w, pixels)?;
        let (p, _) = segmenter::predict(&self.state, &self.config, &img, &bank.inner, class_id, &SpatialPrompt::None, seed)
            .map_err(to_py)?;
        Ok(p.probs().to_vec())
    }
}

#[pyclass(name = "Student")]
struct PyStudent {
    net: StudentNet,
}

#[pymethods]
impl PyStudent {
    /// `kind` is `"student"` or `"teacher"`.
    #[staticmethod]
    #[pyo3(signature = (path, kind="student"))]
    fn load(path: PathBuf, kind: &str) -> PyResult<Self> {
        Ok(Self {
            net: StudentNet::load(&path, kind).map_err(to_py)?.0,
        })
    }

    fn predict_mask(&self, h: usize, w: usize, pixels: Vec<f64>) -> PyResult<Vec<u8>> {
        Ok(self.net.predict_mask(&image(h, w, pixels)?).map_err(to_py)?.labels().to_vec())
    }
}

#[pymodule]
fn refseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(ssl_train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(descriptor, m)?)?;
    m.add_class::<PyTemplateBank>()?;
    m.add_class::<PySegmenter>()?;
    m.add_class::<PyStudent>()?;
    Ok(())
}
