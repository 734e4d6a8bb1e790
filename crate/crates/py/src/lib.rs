use std::path::PathBuf;

use nartag::corpus::{Split, Utterance};
use nartag::crf::{self, TransitionMatrix};
use nartag::numerics::Tensor;
use nartag::tagcodec::{self, Labels, MetricsReport};
use nartag::trainer::{self, CheckpointMeta, TrainConfig};
use nartag::{Error, Mode, Model, Refiner};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_mode(mode: Option<&str>, fallback: Mode) -> PyResult<Mode> {
    match mode {
        None => Ok(fallback),
        Some(m) => m.parse().map_err(|e: Error| PyValueError::new_err(e.to_string())),
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("slot_f1", m.slot_f1)?;
    d.set_item("slot_precision", m.slot_precision)?;
    d.set_item("slot_recall", m.slot_recall)?;
    d.set_item("intent_accuracy", m.intent_accuracy)?;
    d.set_item("sentence_accuracy", m.sentence_accuracy)?;
    d.set_item("uncoordinated_count", m.uncoordinated_count)?;
    d.set_item("gold_chunks", m.gold_chunks)?;
    d.set_item("predicted_chunks", m.predicted_chunks)?;
    d.set_item("correct_chunks", m.correct_chunks)?;
    d.set_item("utterances", m.utterances)?;
    Ok(d)
}

/// A trained model loaded from a checkpoint.
#[pyclass(module = "nartag_py")]
struct Tagger {
    model: Model<f32>,
    meta: CheckpointMeta,
}

#[pymethods]
impl Tagger {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, meta) = trainer::load_checkpoint(&path).map_err(py_err)?;
        Ok(Tagger { model, meta })
    }

    /// Mode the checkpoint was trained with.
    #[getter]
    fn mode(&self) -> &'static str {
        self.meta.mode.as_str()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.model.params.num_scalars()
    }

    /// `(intent, tags)` for one whitespace-separated utterance.
    #[pyo3(signature = (text, mode=None))]
    fn tag(&self, text: &str, mode: Option<&str>) -> PyResult<(String, Vec<String>)> {
        let mode = parse_mode(mode, self.meta.mode)?;
        let ids: Vec<usize> = text
            .split_whitespace()
            .map(|t| self.meta.vocab.token_id(&t.to_lowercase()))
            .collect();
        if ids.is_empty() {
            return Err(PyValueError::new_err("empty utterance"));
        }
        let refiner = Refiner::new(&self.model, &self.meta.vocab).map_err(py_err)?;
        let Labels { intent, slot_tags } = refiner
            .decode_single(&ids, mode)
            .map_err(py_err)?
            .to_labels(&self.meta.vocab);
        Ok((intent, slot_tags))
    }

    /// Metrics on a split of the checkpoint's data directory (or `data_dir`).
    #[pyo3(signature = (split="test", mode=None, data_dir=None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        split: &str,
        mode: Option<&str>,
        data_dir: Option<PathBuf>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let split: Split = split.parse().map_err(py_err)?;
        let mode = parse_mode(mode, self.meta.mode)?;
        let dir = data_dir.unwrap_or_else(|| self.meta.data_dir.clone());
        let data = nartag::corpus::load_split(&dir, split).map_err(py_err)?;
        let m = trainer::evaluate_model(&self.model, &self.meta.vocab, &data, mode, 64).map_err(py_err)?;
        metrics_dict(py, &m)
    }
}

/// Trains with `TrainConfig` keys given as keyword arguments and returns the
/// best dev metrics together with the checkpoint path.
#[pyfunction]
#[pyo3(signature = (**settings))]
fn train<'py>(py: Python<'py>, settings: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = TrainConfig::default();
    if let Some(s) = settings {
        for (k, v) in s.iter() {
            let key: String = k.extract()?;
            let value = v.str()?.to_string();
            let value = if v.is_instance_of::<pyo3::types::PyBool>() {
                value.to_lowercase()
            } else {
                value
            };
            cfg.set(&key, &value).map_err(py_err)?;
        }
    }
    cfg.validate().map_err(py_err)?;
    let report = py.detach(|| trainer::train(&cfg)).map_err(py_err)?;
    let d = metrics_dict(py, &report.best_dev)?;
    d.set_item("best_epoch", report.best_epoch)?;
    d.set_item("checkpoint", report.checkpoint)?;
    Ok(d)
}

#[pyfunction]
fn btag_projection(tags: Vec<String>) -> PyResult<Vec<String>> {
    tagcodec::btag_projection(&tags).map_err(py_err)
}

#[pyfunction]
fn count_uncoordinated(tags: Vec<String>) -> PyResult<usize> {
    tagcodec::count_uncoordinated(&tags).map_err(py_err)
}

/// `(slot_type, start, end)` with inclusive ends.
#[pyfunction]
fn parse_chunks(tags: Vec<String>) -> PyResult<Vec<(String, usize, usize)>> {
    Ok(tagcodec::parse_chunks(&tags)
        .map_err(py_err)?
        .into_iter()
        .map(|c| (c.slot_type, c.start, c.end))
        .collect())
}

/// `(position, previous tag or None, tag)` for each transition the CRF rules forbid.
#[pyfunction]
fn validate_crf_rules(tags: Vec<String>) -> PyResult<Vec<(usize, Option<String>, String)>> {
    Ok(tagcodec::validate_crf_rules(&tags)
        .map_err(py_err)?
        .into_iter()
        .map(|v| (v.pos, v.prev_tag, v.tag))
        .collect())
}

/// `gold` holds `(tokens, tags, intent)` triples, `pred` holds `(intent, tags)`.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    gold: Vec<(Vec<String>, Vec<String>, String)>,
    pred: Vec<(String, Vec<String>)>,
) -> PyResult<Bound<'py, PyDict>> {
    let gold: Vec<Utterance> = gold
        .into_iter()
        .enumerate()
        .map(|(id, (tokens, slot_tags, intent))| Utterance {
            id,
            tokens,
            slot_tags,
            intent,
        })
        .collect();
    let pred: Vec<Labels> = pred
        .into_iter()
        .map(|(intent, slot_tags)| Labels { intent, slot_tags })
        .collect();
    metrics_dict(py, &tagcodec::evaluate(&gold, &pred).map_err(py_err)?)
}

fn crf_inputs(emissions: Vec<Vec<f64>>, transitions: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, TransitionMatrix<f64>)> {
    let t = emissions.first().map_or(0, Vec::len);
    if emissions.iter().any(|r| r.len() != t) {
        return Err(PyValueError::new_err("emission rows differ in length"));
    }
    let s = transitions.len();
    if transitions.iter().any(|r| r.len() != s) || s != t + 2 {
        return Err(PyValueError::new_err(format!(
            "transitions must be {0}x{0} for {t} tags",
            t + 2
        )));
    }
    let tm = TransitionMatrix::from_tensor(Tensor::matrix(s, s, transitions.concat())).map_err(py_err)?;
    Ok((emissions.concat(), tm))
}

/// Log partition of a linear-chain CRF. `transitions` is `(T+2)x(T+2)` with
/// start at index `T` and stop at `T+1`.
#[pyfunction]
fn crf_log_partition(emissions: Vec<Vec<f64>>, transitions: Vec<Vec<f64>>) -> PyResult<f64> {
    let (em, tm) = crf_inputs(emissions, transitions)?;
    crf::log_partition(&em, &tm).map_err(py_err)
}

/// Best path and its score.
#[pyfunction]
fn crf_viterbi(emissions: Vec<Vec<f64>>, transitions: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, f64)> {
    let (em, tm) = crf_inputs(emissions, transitions)?;
    if em.is_empty() {
        return Err(PyValueError::new_err("empty sequence"));
    }
    Ok(crf::viterbi_with_score(&em, &tm))
}

/// Runs the finite-difference suite; returns `(passed, max_rel_error)`.
#[pyfunction]
#[pyo3(signature = (seeds=5, tolerance=1e-4))]
fn gradcheck(py: Python<'_>, seeds: u64, tolerance: f64) -> (bool, f64) {
    let seeds: Vec<u64> = (0..seeds).collect();
    let r = py.detach(|| nartag::verify::gradient_suite(&seeds, tolerance));
    (r.passed, r.max_rel_error)
}

#[pymodule]
fn nartag_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tagger>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(btag_projection, m)?)?;
    m.add_function(wrap_pyfunction!(count_uncoordinated, m)?)?;
    m.add_function(wrap_pyfunction!(parse_chunks, m)?)?;
    m.add_function(wrap_pyfunction!(validate_crf_rules, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(crf_log_partition, m)?)?;
    m.add_function(wrap_pyfunction!(crf_viterbi, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
