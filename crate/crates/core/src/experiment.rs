//! End-to-end runs: split, serialize, tokenize, train and report.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, AdapterCheckpoint, CheckpointError};
use crate::dataset::{require_labels, DatasetError, LabeledPair};
use crate::model::{build_model, ConfigKind, EncoderConfig, ModelError, ModelGraph};
use crate::record::{encode_serialized, serialize_record, RecordKind, SerializedEntity};
use crate::summarize::{tfidf_summarize, DocumentFrequencies};
use crate::tokenizer::{encode, VocabError, Vocabulary};
use crate::train::{
    evaluate, finetune, make_splits, train_mlm, Example, FinetuneReport, Metrics, MlmReport, Splits, TrainConfig,
    TrainError,
};

pub const DEFAULT_VOCAB_SIZE: usize = 2000;
pub const DEFAULT_MIN_FREQ: usize = 1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("vocabulary has {vocab} tokens but the checkpoint was trained with {expected}")]
    VocabMismatch { vocab: usize, expected: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Per-entity summarizer over the training split.
#[derive(Debug, Clone)]
pub struct Summarizer {
    pub stats: DocumentFrequencies,
    pub budget: usize,
}

impl Summarizer {
    /// Document frequencies over both sides of `pairs`; each entity gets
    /// half of the room left after `[CLS]` and the two `[SEP]`s.
    pub fn fit(pairs: &[&LabeledPair], max_len: usize) -> Self {
        let mut stats = DocumentFrequencies::new();
        for p in pairs {
            stats.add(&serialize_record(&p.left));
            stats.add(&serialize_record(&p.right));
        }
        Self {
            stats,
            budget: max_len.saturating_sub(3) / 2,
        }
    }

    /// Summarized entity, or the entity unchanged if even its markers and
    /// names exceed the budget (truncation then handles it).
    pub fn apply(&self, e: SerializedEntity) -> SerializedEntity {
        tfidf_summarize(&e, &self.stats, self.budget).unwrap_or(e)
    }
}

pub fn pair_text(pair: &LabeledPair, summarizer: Option<&Summarizer>) -> String {
    let mut left = serialize_record(&pair.left);
    let mut right = serialize_record(&pair.right);
    if let Some(s) = summarizer {
        left = s.apply(left);
        right = s.apply(right);
    }
    encode_serialized(&left, &right, pair.label).text
}

/// Encodes labeled pairs; fails on the first unlabeled one.
pub fn encode_examples(
    pairs: &[&LabeledPair],
    vocab: &Vocabulary,
    max_len: usize,
    summarizer: Option<&Summarizer>,
) -> Result<Vec<Example>, ExperimentError> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let label = p.label.ok_or(DatasetError::Unlabeled { line: i + 1 })?;
            Ok(Example {
                seq: encode(&pair_text(p, summarizer), vocab, max_len),
                label,
            })
        })
        .collect()
}

pub fn build_vocabulary(
    pairs: &[&LabeledPair],
    max_size: usize,
    min_freq: usize,
) -> Result<Vocabulary, ExperimentError> {
    let texts: Vec<String> = pairs.iter().map(|p| pair_text(p, None)).collect();
    Ok(Vocabulary::build(&texts, max_size, min_freq)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub pairs: usize,
    pub positives: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub train_positives: usize,
    pub record_kinds: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub frozen: usize,
    pub trainable: usize,
    pub ratio: f64,
}

impl ParameterSummary {
    pub fn of(model: &ModelGraph) -> Self {
        let c = model.count_parameters();
        Self {
            frozen: c.frozen,
            trainable: c.trainable,
            ratio: c.ratio(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: serde_json::Value,
    pub dataset: DatasetSummary,
    pub parameters: ParameterSummary,
    pub finetune: FinetuneReport,
    pub test: Metrics,
    pub checkpoint_bytes: Option<u64>,
    pub backbone_bytes: Option<u64>,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSpec {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub rate: f64,
    pub summarize: bool,
    pub vocab_max_size: usize,
    pub min_freq: usize,
}

impl Default for FinetuneSpec {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            train: TrainConfig::finetune(),
            rate: 1.0,
            summarize: false,
            vocab_max_size: DEFAULT_VOCAB_SIZE,
            min_freq: DEFAULT_MIN_FREQ,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Adapters<'a> {
    /// Loaded frozen into the lower slot of a pretrained-plus-task model.
    pub pretrained: Option<&'a AdapterCheckpoint>,
    /// Loaded frozen into the invertible adapter of an invertible-plus-task model.
    pub invertible: Option<&'a AdapterCheckpoint>,
}

#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub model: ModelGraph,
    pub vocab: Vocabulary,
    pub splits: Splits,
    pub report: ExperimentReport,
}

fn kind_counts(pairs: &[LabeledPair]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for p in pairs {
        for r in [&p.left, &p.right] {
            let k = match r.kind() {
                RecordKind::Structured => "structured",
                RecordKind::SemiStructured => "semi-structured",
                RecordKind::Text => "text",
            };
            *m.entry(k.to_string()).or_default() += 1;
        }
    }
    m
}

/// Builds the model for `cfg`, loading frozen pre-trained pieces.
pub fn build_for(cfg: EncoderConfig, seed: u64, adapters: &Adapters<'_>) -> Result<ModelGraph, ExperimentError> {
    let mut model = build_model(cfg, seed, adapters.pretrained)?;
    if let Some(inv) = adapters.invertible {
        if cfg.kind != ConfigKind::InvertiblePlusTask {
            return Err(ExperimentError::Invalid(format!(
                "an invertible adapter checkpoint needs the invertible-plus-task configuration, not {}",
                cfg.kind.as_str()
            )));
        }
        checkpoint::apply_checkpoint(&mut model, inv, true)?;
    }
    Ok(model)
}

/// Splits `pairs`, trains over the learning-rate grid and scores the
/// selected model on the test split. With `vocab = None` the vocabulary is
/// built from the training split.
pub fn run_finetune(
    pairs: &[LabeledPair],
    spec: &FinetuneSpec,
    vocab: Option<Vocabulary>,
    adapters: &Adapters<'_>,
    config_echo: serde_json::Value,
) -> Result<FinetuneRun, ExperimentError> {
    let start = Instant::now();
    let labels = require_labels(pairs)?;
    let seed = spec.train.seed;
    let splits = make_splits(&labels, spec.rate, seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| &pairs[i]).collect::<Vec<_>>();
    let (train_p, valid_p, test_p) = (pick(&splits.train), pick(&splits.valid), pick(&splits.test));

    let vocab = match vocab {
        Some(v) => v,
        None => build_vocabulary(&train_p, spec.vocab_max_size, spec.min_freq)?,
    };
    let encoder = EncoderConfig {
        vocab_size: vocab.len(),
        ..spec.encoder
    };
    let summarizer = spec.summarize.then(|| Summarizer::fit(&train_p, encoder.max_len));
    let s = summarizer.as_ref();
    let train = encode_examples(&train_p, &vocab, encoder.max_len, s)?;
    let valid = encode_examples(&valid_p, &vocab, encoder.max_len, s)?;
    let test = encode_examples(&test_p, &vocab, encoder.max_len, s)?;

    let initial = build_for(encoder, seed, adapters)?;
    let parameters = ParameterSummary::of(&initial);
    let outcome = finetune(&initial, &train, &valid, &spec.train)?;
    let test_metrics = evaluate(&outcome.model, &test)?;

    let report = ExperimentReport {
        config: config_echo,
        dataset: DatasetSummary {
            pairs: pairs.len(),
            positives: labels.iter().filter(|&&l| l).count(),
            train: train.len(),
            valid: valid.len(),
            test: test.len(),
            train_positives: train.iter().filter(|e| e.label).count(),
            record_kinds: kind_counts(pairs),
        },
        parameters,
        finetune: outcome.report,
        test: test_metrics,
        checkpoint_bytes: None,
        backbone_bytes: None,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(FinetuneRun {
        model: outcome.model,
        vocab,
        splits,
        report,
    })
}

/// Sequences for masked-language-model training: each entity of each
/// pair on its own, as `[CLS] entity [SEP]`.
pub fn mlm_corpus(pairs: &[LabeledPair], vocab: &Vocabulary, max_len: usize) -> Vec<crate::tokenizer::TokenSequence> {
    use crate::tokenizer::special::{CLS, SEP};
    pairs
        .iter()
        .flat_map(|p| [&p.left, &p.right])
        .map(|r| encode(&format!("{CLS} {} {SEP}", serialize_record(r)), vocab, max_len))
        .collect()
}

#[derive(Debug, Clone)]
pub struct MlmRun {
    pub model: ModelGraph,
    pub report: MlmReport,
}

/// Trains the invertible adapter of a fresh invertible-plus-task model.
/// Every tenth entity is held out for the loss comparison.
pub fn run_mlm(
    pairs: &[LabeledPair],
    encoder: EncoderConfig,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<MlmRun, ExperimentError> {
    let encoder = EncoderConfig {
        vocab_size: vocab.len(),
        kind: ConfigKind::InvertiblePlusTask,
        ..encoder
    };
    let all = mlm_corpus(pairs, vocab, encoder.max_len);
    let (mut corpus, mut heldout) = (Vec::new(), Vec::new());
    for (i, s) in all.into_iter().enumerate() {
        if i % 10 == 9 {
            heldout.push(s);
        } else {
            corpus.push(s);
        }
    }
    let mut model = build_model(encoder, cfg.seed, None)?;
    let report = train_mlm(&mut model, &corpus, &heldout, cfg)?;
    Ok(MlmRun { model, report })
}
