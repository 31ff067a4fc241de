use serde::{Deserialize, Serialize};

use super::ModelError;

/// Which adapters sit on top of the frozen backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfigKind {
    /// One fresh task adapter at every insertion point.
    TaskOnly,
    /// A frozen pre-trained adapter with a fresh task adapter stacked on top.
    PretrainedPlusTask,
    /// An invertible adapter at the embedding boundary plus task adapters.
    InvertiblePlusTask,
}

impl ConfigKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ConfigKind::TaskOnly => "task-only",
            ConfigKind::PretrainedPlusTask => "pretrained-plus-task",
            ConfigKind::InvertiblePlusTask => "invertible-plus-task",
        }
    }
}

impl std::str::FromStr for ConfigKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "task-only" => Ok(ConfigKind::TaskOnly),
            "pretrained-plus-task" => Ok(ConfigKind::PretrainedPlusTask),
            "invertible-plus-task" => Ok(ConfigKind::InvertiblePlusTask),
            other => Err(format!("unknown adapter configuration {other:?}")),
        }
    }
}

/// Shape of the encoder and its adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub bottleneck: usize,
    pub kind: ConfigKind,
}

impl Default for EncoderConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 2,
            heads: 2,
            ff_dim: 256,
            vocab_size: 2000,
            max_len: 128,
            bottleneck: 8,
            kind: ConfigKind::TaskOnly,
        }
    }
}

impl EncoderConfig {
    /// BERT-base dimensions with a 48-wide adapter bottleneck.
    pub fn bert_base() -> Self {
        Self {
            hidden: 768,
            layers: 12,
            heads: 12,
            ff_dim: 3072,
            vocab_size: 30522,
            max_len: 512,
            bottleneck: 48,
            kind: ConfigKind::TaskOnly,
        }
    }

    pub fn with_kind(mut self, kind: ConfigKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.bottleneck < 1 || self.bottleneck >= self.hidden {
            return fail(format!(
                "bottleneck {} must satisfy 1 <= m < d = {}",
                self.bottleneck, self.hidden
            ));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("hidden {} not divisible by {} heads", self.hidden, self.heads));
        }
        if self.max_len < 3 {
            return fail(format!("max_len {} must be at least 3", self.max_len));
        }
        if self.layers == 0 || self.ff_dim == 0 {
            return fail("layers and ff_dim must be positive".into());
        }
        if self.vocab_size <= crate::tokenizer::special::RESERVED.len() {
            return fail(format!("vocab_size {} leaves no room past reserved tokens", self.vocab_size));
        }
        if self.kind == ConfigKind::InvertiblePlusTask && !self.hidden.is_multiple_of(2) {
            return fail(format!("invertible adapter needs an even hidden size, got {}", self.hidden));
        }
        Ok(())
    }
}
