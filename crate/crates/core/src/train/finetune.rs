use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{predict_row, Metrics};
use super::{AdamW, TrainConfig, TrainError};
use crate::model::ModelGraph;
use crate::tensor::{Graph, Tensor};
use crate::tokenizer::TokenSequence;

const EVAL_CHUNK: usize = 64;

/// One encoded, labeled pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub seq: TokenSequence,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Mean cross-entropy over the batch, before the update.
    pub loss: f64,
    /// Logits the loss was computed from (`batch×2`).
    pub logits: Tensor,
}

/// Forward, backward and one optimizer update on `batch`.
pub fn train_step(model: &mut ModelGraph, opt: &mut AdamW, batch: &[&Example]) -> Result<StepOutput, TrainError> {
    let seqs: Vec<TokenSequence> = batch.iter().map(|e| e.seq.clone()).collect();
    let labels: Vec<usize> = batch.iter().map(|e| usize::from(e.label)).collect();
    let (loss, logits, grads) = {
        let mut g = Graph::new();
        let z = model.logits_var(&mut g, &seqs)?;
        let loss = g.cross_entropy(z, &labels)?;
        let out = (g.value(loss).item(), g.value(z).clone());
        g.backward(loss)?;
        (out.0, out.1, g.take_param_grads())
    };
    let store = model.params_mut();
    for (id, grad) in grads {
        store.accumulate_grad(id, &grad);
    }
    opt.step(store);
    Ok(StepOutput { loss, logits })
}

/// Match predictions for every sequence; logits ties predict non-match.
pub fn predict(model: &ModelGraph, seqs: &[TokenSequence]) -> Result<Vec<bool>, TrainError> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EVAL_CHUNK) {
        let z = model.forward(chunk)?;
        out.extend((0..chunk.len()).map(|r| predict_row(z.row(r))));
    }
    Ok(out)
}

pub fn evaluate(model: &ModelGraph, examples: &[Example]) -> Result<Metrics, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyEvalSet);
    }
    let seqs: Vec<TokenSequence> = examples.iter().map(|e| e.seq.clone()).collect();
    let predicted = predict(model, &seqs)?;
    let actual: Vec<bool> = examples.iter().map(|e| e.label).collect();
    Ok(Metrics::from_predictions(&predicted, &actual))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrRun {
    pub lr: f64,
    pub steps: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_valid_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub runs: Vec<LrRun>,
    pub selected_lr: Option<f64>,
    pub selected_epoch: Option<usize>,
    pub best_valid_f1: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: ModelGraph,
    pub report: FinetuneReport,
}

/// Grid search over `cfg.learning_rates`. Every run starts from `initial`
/// with the same shuffling seed; the snapshot with the highest validation
/// F1 over all runs and epochs is returned (earlier snapshots win ties).
pub fn finetune(
    initial: &ModelGraph,
    train: &[Example],
    valid: &[Example],
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if valid.is_empty() {
        return Err(TrainError::EmptyEvalSet);
    }
    let mut warnings = Vec::new();
    let positives = train.iter().filter(|e| e.label).count();
    if positives == 0 || positives == train.len() {
        let msg = format!("training set has a single class ({} examples)", train.len());
        warn!("{msg}");
        warnings.push(msg);
    }

    let mut runs = Vec::with_capacity(cfg.learning_rates.len());
    let mut best: Option<(f64, usize, f64, Vec<_>)> = None;
    for &lr in &cfg.learning_rates {
        let mut model = initial.clone();
        let mut opt = AdamW::new(lr, cfg.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut run = LrRun {
            lr,
            steps: 0,
            epochs: Vec::with_capacity(cfg.epochs),
            best_epoch: None,
            best_valid_f1: None,
        };
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
                total += train_step(&mut model, &mut opt, &batch)?.loss;
                batches += 1;
            }
            let m = evaluate(&model, valid)?;
            info!("lr {lr:e} epoch {epoch}: train loss {:.4}, valid f1 {:.4}", total / batches as f64, m.f1);
            run.epochs.push(EpochRecord {
                epoch,
                train_loss: total / batches as f64,
                valid: m,
            });
            if run.best_valid_f1.is_none_or(|b| m.f1 > b) {
                run.best_valid_f1 = Some(m.f1);
                run.best_epoch = Some(epoch);
            }
            if best.as_ref().is_none_or(|b| m.f1 > b.2) {
                best = Some((lr, epoch, m.f1, model.snapshot_trainable()));
            }
        }
        run.steps = opt.steps();
        runs.push(run);
    }

    let mut model = initial.clone();
    let (selected_lr, selected_epoch, best_valid_f1) = match best {
        Some((lr, epoch, f1, snapshot)) => {
            model.restore(&snapshot);
            (Some(lr), Some(epoch), Some(f1))
        }
        None => (None, None, None),
    };
    Ok(FinetuneOutcome {
        model,
        report: FinetuneReport {
            runs,
            selected_lr,
            selected_epoch,
            best_valid_f1,
            warnings,
        },
    })
}
