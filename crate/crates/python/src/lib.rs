//! Python bindings: load a checkpoint, attribute a target, read reports.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde_json::Value;

use heta_core::baselines::{baseline_attribute, BaselineConfig};
use heta_core::dataset::{self, PlantedSpec};
use heta_core::heta::{self as core, HetaConfig};
use heta_core::model::{Checkpoint, Model as CoreModel, Vocab};
use heta_core::report::AttributionReport;
use heta_core::{HetaError, TokenSequence};

fn py_err(e: HetaError) -> PyErr {
    match e {
        HetaError::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

/// Overlay keyword options onto the default HETA configuration. Unknown
/// names are errors.
fn heta_config(py: Python<'_>, options: Option<&Bound<'_, PyDict>>) -> PyResult<HetaConfig> {
    let mut base = serde_json::to_value(HetaConfig::default()).expect("config serializes");
    if let Some(opts) = options {
        let text: String = py.import("json")?.call_method1("dumps", (opts,))?.extract()?;
        let given: Value = serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let slots = base.as_object_mut().expect("config is an object");
        for (k, v) in given.as_object().into_iter().flatten() {
            match slots.get_mut(k) {
                Some(slot) => *slot = v.clone(),
                None => return Err(PyValueError::new_err(format!("unknown option {:?}", k))),
            }
        }
    }
    let cfg: HetaConfig = serde_json::from_value(base).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// A trained checkpoint with its vocabulary.
#[pyclass(module = "heta")]
struct Model {
    model: CoreModel,
    vocab: Vocab,
}

impl Model {
    fn sequence(&self, text: &str) -> PyResult<TokenSequence> {
        let ids = self.vocab.encode(text);
        if ids.len() < 2 {
            return Err(PyValueError::new_err("text needs a context token and a target"));
        }
        let target = ids.len() - 1;
        TokenSequence::new(ids, target).map_err(py_err)
    }
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(path.as_ref()).map_err(py_err)?;
        let vocab = ck
            .vocab
            .ok_or_else(|| PyValueError::new_err("checkpoint carries no vocabulary"))?;
        Ok(Self { model: ck.model, vocab })
    }

    #[getter]
    fn vocab(&self) -> Vec<String> {
        self.vocab.tokens().to_vec()
    }

    /// Per-token HETA scores for the last token of `text` given the rest.
    #[pyo3(signature = (text, **options))]
    fn attribute(&self, py: Python<'_>, text: &str, options: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<f64>> {
        let cfg = heta_config(py, options)?;
        let t = self.sequence(text)?;
        Ok(core::attribute(&self.model, &t, &cfg).map_err(py_err)?.scores)
    }

    /// Full attribution record as a JSON string.
    #[pyo3(signature = (text, **options))]
    fn report(&self, py: Python<'_>, text: &str, options: Option<&Bound<'_, PyDict>>) -> PyResult<String> {
        let cfg = heta_config(py, options)?;
        let t = self.sequence(text)?;
        let a = core::attribute(&self.model, &t, &cfg).map_err(py_err)?;
        let r = AttributionReport::new("python", &t.ids, &a, &self.vocab).map_err(py_err)?;
        serde_json::to_string(&r).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Scores of a baseline method: grad, input-x-grad, ig or attn-rollout.
    fn baseline(&self, text: &str, method: &str) -> PyResult<Vec<f64>> {
        let cfg = BaselineConfig::new(method.parse().map_err(py_err)?);
        let t = self.sequence(text)?;
        Ok(baseline_attribute(&self.model, &t, &cfg).map_err(py_err)?.scores)
    }

    /// Next-token distribution after `text`.
    fn next_token_probs(&self, text: &str) -> PyResult<Vec<f64>> {
        let ids = self.vocab.encode(text);
        if ids.is_empty() {
            return Err(PyValueError::new_err("empty text"));
        }
        let x = self.model.embed(&ids).map_err(py_err)?;
        self.model
            .distribution(&x, ids.len() - 1, &Default::default())
            .map_err(py_err)
    }
}

/// Planted-evidence corpus records as JSON lines.
#[pyfunction]
#[pyo3(signature = (count, seed = 1))]
fn generate_corpus(count: usize, seed: u64) -> PyResult<Vec<String>> {
    let records = dataset::generate_planted_corpus(&PlantedSpec::default(), count, seed).map_err(py_err)?;
    records
        .iter()
        .map(|r| serde_json::to_string(r).map_err(|e| PyValueError::new_err(e.to_string())))
        .collect()
}

#[pymodule]
fn heta(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
