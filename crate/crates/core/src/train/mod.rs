//! Frozen-backbone training: classifier fine-tuning with a learning-rate
//! grid, masked-language-model training of the invertible adapter,
//! evaluation and split construction.

mod finetune;
mod metrics;
mod mlm;
mod optimizer;
mod splits;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use finetune::{
    evaluate, finetune, predict, train_step, EpochRecord, Example, FinetuneOutcome, FinetuneReport, LrRun,
    StepOutput,
};
pub use metrics::{predict_row, Metrics};
pub use mlm::{mask_tokens, masked_loss, train_mlm, MaskedSequence, MlmEpoch, MlmReport};
pub use optimizer::{AdamW, BETA1, BETA2, EPS, WEIGHT_DECAY};
pub use splits::{make_splits, Splits, TEST_FRACTION, VALID_FRACTION};

use crate::model::ModelError;

pub const DEFAULT_LEARNING_RATES: [f64; 3] = [1e-4, 2e-4, 3e-4];
pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_MASK_PROB: f64 = 0.25;
/// Masking probabilities of the two task-adaptive pre-training presets.
pub const TAPT_MASK_PROBS: [f64; 2] = [0.20, 0.40];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("MLM corpus is empty")]
    EmptyCorpus,
    #[error("masking probability must lie strictly between 0 and 1, got {0}")]
    InvalidMaskProb(f64),
    #[error("learning rates must be positive, got {0}")]
    InvalidLearningRate(f64),
    #[error("no learning rates given")]
    EmptyGrid,
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("train rate must lie in (0, 1], got {0}")]
    InvalidRate(f64),
    #[error("model has no invertible adapter to train")]
    NoInvertibleAdapter,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rates: Vec<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub mask_prob: f64,
}

impl TrainConfig {
    /// Task fine-tuning defaults.
    pub fn finetune() -> Self {
        Self {
            learning_rates: DEFAULT_LEARNING_RATES.to_vec(),
            batch_size: 32,
            epochs: 20,
            weight_decay: WEIGHT_DECAY,
            seed: DEFAULT_SEED,
            mask_prob: DEFAULT_MASK_PROB,
        }
    }

    /// MLM defaults.
    pub fn mlm() -> Self {
        Self {
            learning_rates: vec![2e-4],
            batch_size: 16,
            epochs: 3,
            ..Self::finetune()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rates.is_empty() {
            return Err(TrainError::EmptyGrid);
        }
        if let Some(&lr) = self.learning_rates.iter().find(|&&lr| lr.is_nan() || lr <= 0.0) {
            return Err(TrainError::InvalidLearningRate(lr));
        }
        if self.batch_size == 0 {
            return Err(TrainError::ZeroBatch);
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(TrainError::InvalidMaskProb(self.mask_prob));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::finetune()
    }
}
