//! Parameter inventory of a model, available without allocating weights.

use super::{ConfigKind, EncoderConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Backbone,
    PretrainedAdapter,
    TaskAdapter,
    Invertible,
    Head,
}

impl ParamRole {
    /// Frozen at construction time.
    pub fn frozen_by_default(self) -> bool {
        matches!(self, ParamRole::Backbone | ParamRole::PretrainedAdapter)
    }

    pub fn is_adapter(self) -> bool {
        matches!(
            self,
            ParamRole::PretrainedAdapter | ParamRole::TaskAdapter | ParamRole::Invertible
        )
    }
}

/// Where adapters go in a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterPlan {
    /// Backbone and head only.
    None,
    Config(ConfigKind),
}

impl AdapterPlan {
    pub fn has_block_adapters(self) -> bool {
        matches!(self, AdapterPlan::Config(_))
    }

    pub fn has_pretrained(self) -> bool {
        self == AdapterPlan::Config(ConfigKind::PretrainedPlusTask)
    }

    pub fn has_invertible(self) -> bool {
        self == AdapterPlan::Config(ConfigKind::InvertiblePlusTask)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Adapter insertion points inside one block.
pub const INSERTION_POINTS: [&str; 2] = ["attention", "ffn"];

/// Parameter count of one bottleneck adapter: `2md + d + m`.
pub fn adapter_parameter_count(d: usize, m: usize) -> usize {
    2 * m * d + d + m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterCounts {
    pub frozen: usize,
    pub trainable: usize,
}

impl ParameterCounts {
    /// Trainable over frozen.
    pub fn ratio(&self) -> f64 {
        if self.frozen == 0 {
            0.0
        } else {
            self.trainable as f64 / self.frozen as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelLayout {
    pub specs: Vec<ParamSpec>,
}

fn push(specs: &mut Vec<ParamSpec>, name: String, shape: &[usize], role: ParamRole) {
    specs.push(ParamSpec {
        name,
        shape: shape.to_vec(),
        role,
    });
}

fn push_linear(specs: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize, role: ParamRole) {
    push(specs, format!("{prefix}.weight"), &[fan_in, fan_out], role);
    push(specs, format!("{prefix}.bias"), &[fan_out], role);
}

fn push_norm(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    push(specs, format!("{prefix}.gain"), &[d], ParamRole::Backbone);
    push(specs, format!("{prefix}.bias"), &[d], ParamRole::Backbone);
}

pub(crate) fn push_bottleneck(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize, m: usize, role: ParamRole) {
    push_linear(specs, &format!("{prefix}.down"), d, m, role);
    push_linear(specs, &format!("{prefix}.up"), m, d, role);
}

pub fn adapter_prefix(layer: usize, point: &str, slot: &str) -> String {
    format!("layers.{layer}.{point}.adapter.{slot}")
}

impl ModelLayout {
    pub fn new(cfg: &EncoderConfig, plan: AdapterPlan) -> Self {
        let d = cfg.hidden;
        let m = cfg.bottleneck;
        let mut specs = Vec::new();
        push(&mut specs, "embeddings.token".into(), &[cfg.vocab_size, d], ParamRole::Backbone);
        push(&mut specs, "embeddings.position".into(), &[cfg.max_len, d], ParamRole::Backbone);
        push_norm(&mut specs, "embeddings.norm", d);
        if plan.has_invertible() {
            push_bottleneck(&mut specs, "invertible.f", d / 2, m, ParamRole::Invertible);
            push_bottleneck(&mut specs, "invertible.g", d / 2, m, ParamRole::Invertible);
        }
        for layer in 0..cfg.layers {
            let p = format!("layers.{layer}");
            for proj in ["query", "key", "value", "output"] {
                push_linear(&mut specs, &format!("{p}.attention.{proj}"), d, d, ParamRole::Backbone);
            }
            push_norm(&mut specs, &format!("{p}.attention.norm"), d);
            push_linear(&mut specs, &format!("{p}.ffn.inner"), d, cfg.ff_dim, ParamRole::Backbone);
            push_linear(&mut specs, &format!("{p}.ffn.outer"), cfg.ff_dim, d, ParamRole::Backbone);
            push_norm(&mut specs, &format!("{p}.ffn.norm"), d);
            if plan.has_block_adapters() {
                for point in INSERTION_POINTS {
                    if plan.has_pretrained() {
                        push_bottleneck(
                            &mut specs,
                            &adapter_prefix(layer, point, "pretrained"),
                            d,
                            m,
                            ParamRole::PretrainedAdapter,
                        );
                    }
                    push_bottleneck(&mut specs, &adapter_prefix(layer, point, "task"), d, m, ParamRole::TaskAdapter);
                }
            }
        }
        push(&mut specs, "mlm.bias".into(), &[cfg.vocab_size], ParamRole::Backbone);
        push_linear(&mut specs, "head", d, 2, ParamRole::Head);
        Self { specs }
    }

    pub fn counts(&self) -> ParameterCounts {
        let mut c = ParameterCounts { frozen: 0, trainable: 0 };
        for s in &self.specs {
            if s.role.frozen_by_default() {
                c.frozen += s.numel();
            } else {
                c.trainable += s.numel();
            }
        }
        c
    }

    pub fn count_role(&self, role: ParamRole) -> usize {
        self.specs.iter().filter(|s| s.role == role).map(ParamSpec::numel).sum()
    }
}
