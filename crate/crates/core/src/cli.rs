//! Command-line harness.
//!
//! Every subcommand writes its artifacts plus a `config.json` echo of the
//! fully resolved arguments into the output directory, which defaults to
//! `$ADAPTMATCH_OUT` or `runs`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{self, AdapterCheckpoint, SaveOptions};
use crate::dataset::{generate_synthetic, ingest_dataset, require_labels, to_jsonl, LabeledPair, SyntheticConfig};
use crate::experiment::{
    build_for, build_vocabulary, encode_examples, run_finetune, run_mlm, Adapters, ExperimentError, FinetuneSpec,
    ParameterSummary, DEFAULT_MIN_FREQ, DEFAULT_VOCAB_SIZE,
};
use crate::model::{ConfigKind, EncoderConfig, ParamRole};
use crate::record::RecordKind;
use crate::tokenizer::Vocabulary;
use crate::train::{evaluate, TrainConfig, DEFAULT_SEED};

pub const OUT_ENV: &str = "ADAPTMATCH_OUT";
pub const DEFAULT_OUT: &str = "runs";

pub const ADAPTERS_FILE: &str = "adapters.aem";
pub const BACKBONE_FILE: &str = "backbone.aem";
pub const INVERTIBLE_FILE: &str = "invertible.aem";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Parser, Serialize)]
#[command(name = "adaptmatch", version, about = "Adapter tuning for generalized entity matching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case", tag = "subcommand")]
pub enum Command {
    /// Build a vocabulary file from one or more datasets.
    BuildVocab(BuildVocabArgs),
    /// Train an invertible adapter with the masked-token objective.
    TrainMlm(TrainMlmArgs),
    /// Fine-tune adapters and head over the learning-rate grid.
    Finetune(FinetuneArgs),
    /// Score a saved adapter checkpoint on a labeled dataset.
    Evaluate(EvaluateArgs),
    /// Compare adapter checkpoint sizes with the backbone file.
    ReportStorage(ReportStorageArgs),
    /// Write the planted-keyword synthetic dataset.
    GenerateSynthetic(GenerateArgs),
}

fn default_out() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

#[derive(Debug, Args, Serialize)]
pub struct OutputArgs {
    /// Output directory [default: $ADAPTMATCH_OUT or "runs"].
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl OutputArgs {
    pub fn resolve(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(default_out)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    /// JSON-lines dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Read every record as this kind instead of inferring it from JSON shape.
    #[arg(long)]
    pub kind: Option<RecordKindArg>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordKindArg {
    Structured,
    SemiStructured,
    Text,
}

impl From<RecordKindArg> for RecordKind {
    fn from(k: RecordKindArg) -> Self {
        match k {
            RecordKindArg::Structured => RecordKind::Structured,
            RecordKindArg::SemiStructured => RecordKind::SemiStructured,
            RecordKindArg::Text => RecordKind::Text,
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfigKindArg {
    TaskOnly,
    PretrainedPlusTask,
    InvertiblePlusTask,
}

impl From<ConfigKindArg> for ConfigKind {
    fn from(k: ConfigKindArg) -> Self {
        match k {
            ConfigKindArg::TaskOnly => ConfigKind::TaskOnly,
            ConfigKindArg::PretrainedPlusTask => ConfigKind::PretrainedPlusTask,
            ConfigKindArg::InvertiblePlusTask => ConfigKind::InvertiblePlusTask,
        }
    }
}

/// Encoder shape overrides; unset fields keep the desk-scale defaults.
#[derive(Debug, Args, Serialize)]
pub struct EncoderArgs {
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ff_dim: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Adapter bottleneck width.
    #[arg(long)]
    pub bottleneck: Option<usize>,
}

impl EncoderArgs {
    pub fn resolve(&self, kind: ConfigKind) -> EncoderConfig {
        let d = EncoderConfig::default();
        EncoderConfig {
            hidden: self.hidden.unwrap_or(d.hidden),
            layers: self.layers.unwrap_or(d.layers),
            heads: self.heads.unwrap_or(d.heads),
            ff_dim: self.ff_dim.unwrap_or(d.ff_dim),
            max_len: self.max_len.unwrap_or(d.max_len),
            bottleneck: self.bottleneck.unwrap_or(d.bottleneck),
            vocab_size: d.vocab_size,
            kind,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct VocabArgs {
    /// Existing vocabulary file; built from the training data when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = DEFAULT_MIN_FREQ)]
    pub min_freq: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildVocabArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = DEFAULT_MIN_FREQ)]
    pub min_freq: usize,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainMlmArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub vocab: VocabArgs,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    /// Masking probability; 0.20 and 0.40 are the task-adaptive presets.
    #[arg(long, default_value_t = crate::train::DEFAULT_MASK_PROB)]
    pub mask_prob: f64,
    #[arg(long, default_value_t = crate::train::WEIGHT_DECAY)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub vocab: VocabArgs,
    #[arg(long, value_enum, default_value = "task-only")]
    pub config: ConfigKindArg,
    /// Adapter checkpoint loaded frozen under the task adapters.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Invertible adapter checkpoint from train-mlm, loaded frozen.
    #[arg(long)]
    pub invertible: Option<PathBuf>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    /// Learning-rate grid (repeat the flag or separate with commas).
    #[arg(long = "lr", value_delimiter = ',', default_values_t = crate::train::DEFAULT_LEARNING_RATES)]
    pub learning_rates: Vec<f64>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = crate::train::WEIGHT_DECAY)]
    pub weight_decay: f64,
    /// Fraction of each class kept for training.
    #[arg(long, default_value_t = 1.0)]
    pub rate: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Shorten entities by TF-IDF before tokenizing.
    #[arg(long)]
    pub summarize: bool,
    /// Leave the classifier head out of the adapter checkpoint.
    #[arg(long)]
    pub exclude_head: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Adapter checkpoint written by finetune.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Vocabulary file [default: vocab.txt next to the checkpoint].
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long)]
    pub invertible: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportStorageArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long = "adapter")]
    pub adapters: Vec<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    /// Destination JSON-lines file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = SyntheticConfig::default().pairs)]
    pub pairs: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().positive_fraction)]
    pub positive_fraction: f64,
    #[arg(long, default_value_t = SyntheticConfig::default().seed)]
    pub seed: u64,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Invalid(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| ExperimentError::Invalid(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(io(path))
}

fn prepare_out(out: &Path, echo: &serde_json::Value) -> Result<(), ExperimentError> {
    fs::create_dir_all(out).map_err(io(out))?;
    write_json(&out.join(CONFIG_FILE), echo)
}

fn require_file(path: &Path) -> Result<(), ExperimentError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(ExperimentError::Invalid(format!("{}: no such file", path.display())))
    }
}

fn load_data(d: &DataArgs) -> Result<Vec<LabeledPair>, ExperimentError> {
    require_file(&d.data)?;
    Ok(ingest_dataset(&d.data, d.kind.map(Into::into))?)
}

fn load_ckpt(path: &Option<PathBuf>) -> Result<Option<AdapterCheckpoint>, ExperimentError> {
    path.as_ref()
        .map(|p| {
            require_file(p)?;
            Ok(AdapterCheckpoint::read(p)?)
        })
        .transpose()
}

fn load_vocab(path: &Path) -> Result<Vocabulary, ExperimentError> {
    require_file(path)?;
    Ok(Vocabulary::load(path)?)
}

fn echo(cli: &Cli) -> serde_json::Value {
    serde_json::to_value(cli).expect("arguments serialize")
}

/// Runs one parsed command. Returns the lines to print on success.
pub fn run(cli: &Cli) -> Result<Vec<String>, ExperimentError> {
    let echo = echo(cli);
    match &cli.command {
        Command::BuildVocab(a) => {
            let pairs = load_data(&a.data)?;
            let refs: Vec<&LabeledPair> = pairs.iter().collect();
            let vocab = build_vocabulary(&refs, a.vocab_size, a.min_freq)?;
            let out = a.output.resolve();
            prepare_out(&out, &echo)?;
            let path = out.join(VOCAB_FILE);
            vocab.save(&path)?;
            Ok(vec![format!("wrote {} ({} tokens)", path.display(), vocab.len())])
        }
        Command::TrainMlm(a) => {
            let pairs = load_data(&a.data)?;
            let vocab = match &a.vocab.vocab {
                Some(p) => load_vocab(p)?,
                None => {
                    let refs: Vec<&LabeledPair> = pairs.iter().collect();
                    build_vocabulary(&refs, a.vocab.vocab_size, a.vocab.min_freq)?
                }
            };
            let cfg = TrainConfig {
                learning_rates: vec![a.lr],
                batch_size: a.batch_size,
                epochs: a.epochs,
                weight_decay: a.weight_decay,
                seed: a.seed,
                mask_prob: a.mask_prob,
            };
            let run = run_mlm(&pairs, a.encoder.resolve(ConfigKind::InvertiblePlusTask), &vocab, &cfg)?;
            let out = a.output.resolve();
            prepare_out(&out, &echo)?;
            vocab.save(&out.join(VOCAB_FILE))?;
            let ckpt = AdapterCheckpoint::with_roles(&run.model, &[ParamRole::Invertible]);
            let bytes = ckpt.write(&out.join(INVERTIBLE_FILE))?;
            checkpoint::save_backbone(&run.model, &out.join(BACKBONE_FILE))?;
            write_json(&out.join(REPORT_FILE), &run.report)?;
            let last = run.report.epochs.last().and_then(|e| e.heldout_loss);
            Ok(vec![format!(
                "wrote {} ({bytes} bytes); held-out masked loss {:?} -> {:?}",
                out.join(INVERTIBLE_FILE).display(),
                run.report.initial_heldout_loss,
                last
            )])
        }
        Command::Finetune(a) => {
            let pairs = load_data(&a.data)?;
            let vocab = a.vocab.vocab.as_deref().map(load_vocab).transpose()?;
            let pretrained = load_ckpt(&a.pretrained)?;
            let invertible = load_ckpt(&a.invertible)?;
            let spec = FinetuneSpec {
                encoder: a.encoder.resolve(a.config.into()),
                train: TrainConfig {
                    learning_rates: a.learning_rates.clone(),
                    batch_size: a.batch_size,
                    epochs: a.epochs,
                    weight_decay: a.weight_decay,
                    seed: a.seed,
                    ..TrainConfig::finetune()
                },
                rate: a.rate,
                summarize: a.summarize,
                vocab_max_size: a.vocab.vocab_size,
                min_freq: a.vocab.min_freq,
            };
            let adapters = Adapters {
                pretrained: pretrained.as_ref(),
                invertible: invertible.as_ref(),
            };
            let out = a.output.resolve();
            prepare_out(&out, &echo)?;
            let mut run = run_finetune(&pairs, &spec, vocab, &adapters, echo.clone())?;
            run.vocab.save(&out.join(VOCAB_FILE))?;
            let opts = SaveOptions {
                include_head: !a.exclude_head,
            };
            run.report.checkpoint_bytes = Some(checkpoint::save_adapters(&run.model, &out.join(ADAPTERS_FILE), opts)?);
            run.report.backbone_bytes = Some(checkpoint::save_backbone(&run.model, &out.join(BACKBONE_FILE))?);
            write_json(&out.join(REPORT_FILE), &run.report)?;
            Ok(vec![format!(
                "selected lr {:?} epoch {:?}: valid f1 {:.4}, test f1 {:.4}; wrote {}",
                run.report.finetune.selected_lr,
                run.report.finetune.selected_epoch,
                run.report.finetune.best_valid_f1.unwrap_or(0.0),
                run.report.test.f1,
                out.display()
            )])
        }
        Command::Evaluate(a) => {
            let pairs = load_data(&a.data)?;
            require_labels(&pairs)?;
            require_file(&a.checkpoint)?;
            let ckpt = AdapterCheckpoint::read(&a.checkpoint)?;
            let vocab_path = a.vocab.clone().unwrap_or_else(|| {
                a.checkpoint.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE)
            });
            let vocab = load_vocab(&vocab_path)?;
            let meta = &ckpt.metadata;
            if vocab.len() != meta.encoder.vocab_size {
                return Err(ExperimentError::VocabMismatch {
                    vocab: vocab.len(),
                    expected: meta.encoder.vocab_size,
                });
            }
            let pretrained = load_ckpt(&a.pretrained)?;
            let invertible = load_ckpt(&a.invertible)?;
            let adapters = Adapters {
                pretrained: pretrained.as_ref(),
                invertible: invertible.as_ref(),
            };
            let mut model = build_for(meta.encoder, meta.seed, &adapters)?;
            checkpoint::apply_checkpoint(&mut model, &ckpt, false)?;
            let refs: Vec<&LabeledPair> = pairs.iter().collect();
            let examples = encode_examples(&refs, &vocab, meta.encoder.max_len, None)?;
            let metrics = evaluate(&model, &examples)?;
            let out = a.output.resolve();
            prepare_out(&out, &echo)?;
            #[derive(Serialize)]
            struct EvalReport<'a> {
                config: &'a serde_json::Value,
                pairs: usize,
                parameters: ParameterSummary,
                metrics: crate::train::Metrics,
            }
            write_json(
                &out.join("metrics.json"),
                &EvalReport {
                    config: &echo,
                    pairs: pairs.len(),
                    parameters: ParameterSummary::of(&model),
                    metrics,
                },
            )?;
            Ok(vec![format!(
                "precision {:.4} recall {:.4} f1 {:.4} on {} pairs",
                metrics.precision,
                metrics.recall,
                metrics.f1,
                pairs.len()
            )])
        }
        Command::ReportStorage(a) => {
            let report = checkpoint::storage_report(&a.backbone, &a.adapters)?;
            let out = a.output.resolve();
            prepare_out(&out, &echo)?;
            write_json(&out.join("storage.json"), &report)?;
            Ok(vec![format!(
                "backbone {} bytes, {} adapter files, mean adapter/backbone ratio {:.4}",
                report.backbone_bytes,
                report.per_adapter_bytes.len(),
                report.ratio
            )])
        }
        Command::GenerateSynthetic(a) => {
            let pairs = generate_synthetic(&SyntheticConfig {
                pairs: a.pairs,
                positive_fraction: a.positive_fraction,
                seed: a.seed,
            });
            if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(io(dir))?;
            }
            fs::write(&a.out, to_jsonl(&pairs)).map_err(io(&a.out))?;
            Ok(vec![format!("wrote {} pairs to {}", pairs.len(), a.out.display())])
        }
    }
}

/// Error text with its cause chain on one line.
pub fn describe(err: &dyn std::error::Error) -> String {
    let mut s = err.to_string();
    let mut cur = err.source();
    while let Some(e) = cur {
        let msg = e.to_string();
        if !s.contains(&msg) {
            s.push_str(": ");
            s.push_str(&msg);
        }
        cur = e.source();
    }
    s
}
