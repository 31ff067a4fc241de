//! Python bindings: record serialization, vocabularies, adapter models,
//! checkpoints and the fine-tuning pipeline.

use std::path::PathBuf;

use adaptmatch::checkpoint::{self, AdapterCheckpoint, SaveOptions};
use adaptmatch::cli::describe;
use adaptmatch::dataset::{generate_synthetic, parse_jsonl, to_jsonl, SyntheticConfig, BUNDLED_SYNTHETIC};
use adaptmatch::experiment::{run_finetune, Adapters, FinetuneSpec};
use adaptmatch::model::{adapter_parameter_count, build_model, ConfigKind, EncoderConfig, ModelGraph};
use adaptmatch::record::{self as rec, Record};
use adaptmatch::tokenizer::{self, TokenSequence};
use adaptmatch::train::{self, TrainConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: impl std::error::Error) -> PyErr {
    PyValueError::new_err(describe(&e))
}

fn record_from_py(obj: &Bound<'_, PyAny>) -> PyResult<Record> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(err)?;
    Record::from_json(&value).map_err(err)
}

/// Serializes a record given as a dict (structured or nested) or a string.
#[pyfunction]
fn serialize_record(record: &Bound<'_, PyAny>) -> PyResult<String> {
    Ok(rec::serialize_record(&record_from_py(record)?).as_str().to_string())
}

/// `[CLS] left [SEP] right [SEP]`.
#[pyfunction]
fn encode_pair(left: &Bound<'_, PyAny>, right: &Bound<'_, PyAny>) -> PyResult<String> {
    Ok(rec::encode_pair(&record_from_py(left)?, &record_from_py(right)?, None).text)
}

#[pyfunction]
#[pyo3(name = "adapter_parameter_count")]
fn py_adapter_parameter_count(d: usize, m: usize) -> usize {
    adapter_parameter_count(d, m)
}

/// The planted-keyword dataset as JSON lines.
#[pyfunction]
#[pyo3(signature = (pairs = None, positive_fraction = None, seed = None))]
fn synthetic_dataset(pairs: Option<usize>, positive_fraction: Option<f64>, seed: Option<u64>) -> String {
    if pairs.is_none() && positive_fraction.is_none() && seed.is_none() {
        return BUNDLED_SYNTHETIC.to_string();
    }
    let d = SyntheticConfig::default();
    to_jsonl(&generate_synthetic(&SyntheticConfig {
        pairs: pairs.unwrap_or(d.pairs),
        positive_fraction: positive_fraction.unwrap_or(d.positive_fraction),
        seed: seed.unwrap_or(d.seed),
    }))
}

/// Train/valid/test index lists for binary labels.
#[pyfunction]
#[pyo3(signature = (labels, rate = 1.0, seed = train::DEFAULT_SEED))]
fn make_splits(labels: Vec<bool>, rate: f64, seed: u64) -> PyResult<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let s = train::make_splits(&labels, rate, seed).map_err(err)?;
    Ok((s.train, s.valid, s.test))
}

#[pyclass(name = "Vocabulary", module = "adaptmatch_py")]
struct PyVocabulary(tokenizer::Vocabulary);

#[pymethods]
impl PyVocabulary {
    #[staticmethod]
    #[pyo3(signature = (texts, max_size = 2000, min_freq = 1))]
    fn build(texts: Vec<String>, max_size: usize, min_freq: usize) -> PyResult<Self> {
        tokenizer::Vocabulary::build(&texts, max_size, min_freq).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        tokenizer::Vocabulary::load(&path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    /// Token ids after truncation to `max_len`.
    fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        tokenizer::encode(text, &self.0, max_len).ids
    }

    fn token(&self, id: u32) -> Option<String> {
        self.0.token(id).map(str::to_string)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "Model", module = "adaptmatch_py")]
struct PyModel(ModelGraph);

fn sequences(model: &ModelGraph, batch: Vec<Vec<u32>>) -> Vec<TokenSequence> {
    let max_len = model.config().max_len;
    batch
        .into_iter()
        .map(|ids| TokenSequence {
            attention_mask: ids.iter().map(|&i| u8::from(i != tokenizer::special::PAD_ID)).collect(),
            ids,
            max_len,
        })
        .collect()
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (vocab_size, kind = "task-only", hidden = 64, layers = 2, heads = 2, ff_dim = 256, max_len = 128, bottleneck = 8, seed = train::DEFAULT_SEED, pretrained = None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab_size: usize,
        kind: &str,
        hidden: usize,
        layers: usize,
        heads: usize,
        ff_dim: usize,
        max_len: usize,
        bottleneck: usize,
        seed: u64,
        pretrained: Option<PathBuf>,
    ) -> PyResult<Self> {
        let kind: ConfigKind = kind.parse().map_err(PyValueError::new_err)?;
        let cfg = EncoderConfig {
            hidden,
            layers,
            heads,
            ff_dim,
            vocab_size,
            max_len,
            bottleneck,
            kind,
        };
        let ckpt = pretrained.map(|p| AdapterCheckpoint::read(&p)).transpose().map_err(err)?;
        build_model(cfg, seed, ckpt.as_ref()).map(Self).map_err(err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.0.config().kind.as_str()
    }

    #[getter]
    fn max_len(&self) -> usize {
        self.0.config().max_len
    }

    /// `{"frozen": .., "trainable": .., "ratio": ..}`.
    fn parameter_counts<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = self.0.count_parameters();
        let d = PyDict::new(py);
        d.set_item("frozen", c.frozen)?;
        d.set_item("trainable", c.trainable)?;
        d.set_item("ratio", c.ratio())?;
        Ok(d)
    }

    /// Class logits, one `[non-match, match]` row per id list.
    fn forward(&self, batch: Vec<Vec<u32>>) -> PyResult<Vec<Vec<f64>>> {
        let seqs = sequences(&self.0, batch);
        let z = self.0.forward(&seqs).map_err(err)?;
        Ok((0..seqs.len()).map(|r| z.row(r).to_vec()).collect())
    }

    fn predict(&self, batch: Vec<Vec<u32>>) -> PyResult<Vec<bool>> {
        train::predict(&self.0, &sequences(&self.0, batch)).map_err(err)
    }

    fn backbone_fingerprint(&self) -> String {
        self.0.backbone_fingerprint()
    }

    /// Writes adapter (and by default head) tensors; returns the file size.
    #[pyo3(signature = (path, include_head = true))]
    fn save_adapters(&self, path: PathBuf, include_head: bool) -> PyResult<u64> {
        checkpoint::save_adapters(&self.0, &path, SaveOptions { include_head }).map_err(err)
    }

    fn save_backbone(&self, path: PathBuf) -> PyResult<u64> {
        checkpoint::save_backbone(&self.0, &path).map_err(err)
    }

    #[pyo3(signature = (path, freeze = false))]
    fn load_adapters(&mut self, path: PathBuf, freeze: bool) -> PyResult<()> {
        checkpoint::load_adapters(&mut self.0, &path, freeze).map_err(err)
    }
}

#[pyclass(name = "FinetuneResult", module = "adaptmatch_py")]
struct PyFinetuneResult {
    #[pyo3(get)]
    model: Py<PyModel>,
    #[pyo3(get)]
    vocabulary: Py<PyVocabulary>,
    /// The full report as a JSON string.
    #[pyo3(get)]
    report: String,
    #[pyo3(get)]
    test_f1: f64,
}

/// Splits a JSON-lines dataset, tunes adapters over the learning-rate grid
/// and scores the selected model on the test split.
#[pyfunction]
#[pyo3(signature = (jsonl, kind = "task-only", learning_rates = None, epochs = 20, batch_size = 32, rate = 1.0, seed = train::DEFAULT_SEED, summarize = false))]
#[allow(clippy::too_many_arguments)]
fn finetune(
    py: Python<'_>,
    jsonl: &str,
    kind: &str,
    learning_rates: Option<Vec<f64>>,
    epochs: usize,
    batch_size: usize,
    rate: f64,
    seed: u64,
    summarize: bool,
) -> PyResult<PyFinetuneResult> {
    let pairs = parse_jsonl(jsonl, None).map_err(err)?;
    let kind: ConfigKind = kind.parse().map_err(PyValueError::new_err)?;
    let spec = FinetuneSpec {
        encoder: EncoderConfig::default().with_kind(kind),
        train: TrainConfig {
            learning_rates: learning_rates.unwrap_or_else(|| train::DEFAULT_LEARNING_RATES.to_vec()),
            epochs,
            batch_size,
            seed,
            ..TrainConfig::finetune()
        },
        rate,
        summarize,
        ..FinetuneSpec::default()
    };
    let run = run_finetune(&pairs, &spec, None, &Adapters::default(), serde_json::json!({"source": "python"}))
        .map_err(err)?;
    let report = serde_json::to_string(&run.report).map_err(err)?;
    Ok(PyFinetuneResult {
        test_f1: run.report.test.f1,
        model: Py::new(py, PyModel(run.model))?,
        vocabulary: Py::new(py, PyVocabulary(run.vocab))?,
        report,
    })
}

#[pymodule]
fn adaptmatch_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(serialize_record, m)?)?;
    m.add_function(wrap_pyfunction!(encode_pair, m)?)?;
    m.add_function(wrap_pyfunction!(py_adapter_parameter_count, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(make_splits, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyFinetuneResult>()?;
    Ok(())
}
