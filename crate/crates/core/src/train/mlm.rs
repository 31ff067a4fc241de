use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamW, TrainConfig, TrainError};
use crate::model::{ModelGraph, ParamRole};
use crate::tensor::{Graph, Var};
use crate::tokenizer::special::{MASK_ID, RESERVED};
use crate::tokenizer::TokenSequence;

const FIRST_ORDINARY_ID: u32 = RESERVED.len() as u32;
/// Offset that separates the held-out masking stream from the training one.
const HELDOUT_STREAM: u64 = 0x6d6c6d;

/// A corrupted copy of a sequence plus the original ids at the selected
/// positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub input: TokenSequence,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

/// Selects each real, non-reserved token with probability `p`; selected
/// tokens become `[MASK]` 80% of the time, a random ordinary token 10% and
/// stay unchanged 10%.
pub fn mask_tokens(seq: &TokenSequence, vocab_size: usize, p: f64, rng: &mut impl Rng) -> MaskedSequence {
    let mut input = seq.clone();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for i in 0..seq.ids.len() {
        let id = seq.ids[i];
        if seq.attention_mask[i] == 0 || id < FIRST_ORDINARY_ID || !rng.random_bool(p) {
            continue;
        }
        positions.push(i);
        targets.push(id);
        let r: f64 = rng.random();
        if r < 0.8 {
            input.ids[i] = MASK_ID;
        } else if r < 0.9 && vocab_size as u32 > FIRST_ORDINARY_ID {
            input.ids[i] = rng.random_range(FIRST_ORDINARY_ID..vocab_size as u32);
        }
    }
    MaskedSequence {
        input,
        positions,
        targets,
    }
}

fn loss_var<'a>(g: &mut Graph<'a>, model: &'a ModelGraph, batch: &[&MaskedSequence]) -> Result<Option<Var>, TrainError> {
    let mut parts = Vec::new();
    let mut targets = Vec::new();
    for ms in batch.iter().filter(|m| !m.positions.is_empty()) {
        parts.push(model.mlm_logits_var(g, &ms.input, &ms.positions)?);
        targets.extend(ms.targets.iter().map(|&t| t as usize));
    }
    if parts.is_empty() {
        return Ok(None);
    }
    let logits = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0)? };
    Ok(Some(g.cross_entropy(logits, &targets)?))
}

/// Mean cross-entropy over every masked position in `batch`, or `None`
/// when nothing is masked.
pub fn masked_loss(model: &ModelGraph, batch: &[MaskedSequence]) -> Result<Option<f64>, TrainError> {
    let refs: Vec<&MaskedSequence> = batch.iter().collect();
    let mut g = Graph::new();
    Ok(loss_var(&mut g, model, &refs)?.map(|v| g.value(v).item()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub masked_tokens: usize,
    pub heldout_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmReport {
    pub lr: f64,
    pub mask_prob: f64,
    pub initial_heldout_loss: Option<f64>,
    pub epochs: Vec<MlmEpoch>,
}

/// Trains only the invertible adapter with the masked-token objective.
/// Every other parameter is held frozen for the duration; the original
/// frozen flags are restored afterwards. Held-out masks are drawn once so
/// losses before and after training are comparable.
pub fn train_mlm(
    model: &mut ModelGraph,
    corpus: &[TokenSequence],
    heldout: &[TokenSequence],
    cfg: &TrainConfig,
) -> Result<MlmReport, TrainError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if model.invertible().is_none() {
        return Err(TrainError::NoInvertibleAdapter);
    }
    let vocab_size = model.config().vocab_size;
    let lr = cfg.learning_rates[0];
    let p = cfg.mask_prob;

    let saved: Vec<bool> = model.params().iter().map(|(_, prm)| prm.frozen).collect();
    let ids: Vec<_> = model.params().iter().map(|(id, _)| id).collect();
    for &id in &ids {
        let frozen = model.role(id) != ParamRole::Invertible;
        model.set_frozen(id, frozen);
    }

    let mut held_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ HELDOUT_STREAM);
    let held: Vec<MaskedSequence> = heldout.iter().map(|s| mask_tokens(s, vocab_size, p, &mut held_rng)).collect();
    let held_loss = |m: &ModelGraph| -> Result<Option<f64>, TrainError> {
        if held.is_empty() {
            Ok(None)
        } else {
            masked_loss(m, &held)
        }
    };

    let result = (|| {
        let mut report = MlmReport {
            lr,
            mask_prob: p,
            initial_heldout_loss: held_loss(model)?,
            epochs: Vec::with_capacity(cfg.epochs),
        };
        let mut opt = AdamW::new(lr, cfg.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            let (mut total, mut batches, mut masked) = (0.0, 0usize, 0usize);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<MaskedSequence> = chunk
                    .iter()
                    .map(|&i| mask_tokens(&corpus[i], vocab_size, p, &mut rng))
                    .collect();
                let refs: Vec<&MaskedSequence> = batch.iter().collect();
                let (loss, grads) = {
                    let mut g = Graph::new();
                    let Some(loss) = loss_var(&mut g, model, &refs)? else { continue };
                    let value = g.value(loss).item();
                    g.backward(loss)?;
                    (value, g.take_param_grads())
                };
                let store = model.params_mut();
                for (id, grad) in grads {
                    store.accumulate_grad(id, &grad);
                }
                opt.step(store);
                total += loss;
                batches += 1;
                masked += batch.iter().map(|b| b.positions.len()).sum::<usize>();
            }
            let heldout_loss = held_loss(model)?;
            let train_loss = if batches == 0 { 0.0 } else { total / batches as f64 };
            info!("mlm epoch {epoch}: train loss {train_loss:.4}, held-out {heldout_loss:?}");
            report.epochs.push(MlmEpoch {
                epoch,
                train_loss,
                masked_tokens: masked,
                heldout_loss,
            });
        }
        Ok(report)
    })();

    for (&id, &frozen) in ids.iter().zip(&saved) {
        model.set_frozen(id, frozen);
    }
    result
}
