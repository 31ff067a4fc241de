//! Transformer encoder backbone, bottleneck adapters and classifier head.
//!
//! Every block has two adapter insertion points, after the attention output
//! projection and after the feed-forward projection, each placed before the
//! residual add and layer norm. Fresh adapters start with a zero up
//! projection so a freshly built model computes exactly what its backbone
//! computes.

mod adapter;
mod config;
mod encoder;
mod invertible;
mod layout;

use thiserror::Error;

pub use adapter::{Bottleneck, HoulsbyAdapter, Linear};
pub use config::{ConfigKind, EncoderConfig};
pub use encoder::{AdapterStack, ModelGraph};
pub use invertible::InvertibleAdapter;
pub use layout::{
    adapter_parameter_count, AdapterPlan, ModelLayout, ParamRole, ParamSpec, ParameterCounts, INSERTION_POINTS,
};

use crate::checkpoint::{self, AdapterCheckpoint, CheckpointError};
use crate::tensor::{ParamStore, Parameter, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("pretrained-plus-task configuration requires a pre-trained adapter checkpoint")]
    MissingPretrained,
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("empty batch")]
    EmptyBatch,
    #[error("attention mask length differs from ids")]
    MaskLength,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] Box<CheckpointError>),
}

/// Builds a model for `cfg.kind`. The pretrained-plus-task configuration
/// loads `pretrained` into its frozen lower adapter slot.
pub fn build_model(
    cfg: EncoderConfig,
    seed: u64,
    pretrained: Option<&AdapterCheckpoint>,
) -> Result<ModelGraph, ModelError> {
    let mut model = ModelGraph::new(cfg, AdapterPlan::Config(cfg.kind), seed)?;
    if cfg.kind == ConfigKind::PretrainedPlusTask {
        let ckpt = pretrained.ok_or(ModelError::MissingPretrained)?;
        checkpoint::apply_checkpoint(&mut model, ckpt, true).map_err(Box::new)?;
    }
    Ok(model)
}

/// The same backbone and head without any adapters.
pub fn build_backbone_only(cfg: EncoderConfig, seed: u64) -> Result<ModelGraph, ModelError> {
    ModelGraph::new(cfg, AdapterPlan::None, seed)
}

/// A single adapter in its own store, initialized as in a fresh model.
pub fn standalone_adapter(d: usize, m: usize, seed: u64) -> (ParamStore, HoulsbyAdapter) {
    let mut specs = Vec::new();
    layout::push_bottleneck(&mut specs, "adapter", d, m, ParamRole::TaskAdapter);
    let store = materialize(&specs, seed);
    let a = HoulsbyAdapter::resolve(&store, "adapter").expect("names match layout");
    (store, a)
}

/// A standalone invertible adapter for hidden size `d`.
pub fn standalone_invertible(d: usize, m: usize, seed: u64) -> Result<(ParamStore, InvertibleAdapter), ModelError> {
    if !d.is_multiple_of(2) {
        return Err(ModelError::InvalidConfig(format!(
            "invertible adapter needs an even hidden size, got {d}"
        )));
    }
    let mut specs = Vec::new();
    layout::push_bottleneck(&mut specs, "invertible.f", d / 2, m, ParamRole::Invertible);
    layout::push_bottleneck(&mut specs, "invertible.g", d / 2, m, ParamRole::Invertible);
    let store = materialize(&specs, seed);
    let inv = InvertibleAdapter::resolve(&store, "invertible", d)?;
    Ok((store, inv))
}

fn materialize(specs: &[ParamSpec], seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    for s in specs {
        store.insert(Parameter::new(s.name.clone(), encoder::init_tensor(s, seed), false));
    }
    store
}
