use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::tensor::{Graph, ParamId, ParamStore, Parameter, Tensor, TensorError, Var, LAYER_NORM_EPS};
use crate::tokenizer::TokenSequence;

use super::adapter::{lookup, Linear};
use super::layout::{adapter_prefix, AdapterPlan, ModelLayout, ParamRole, ParamSpec, ParameterCounts, INSERTION_POINTS};
use super::{ConfigKind, EncoderConfig, HoulsbyAdapter, InvertibleAdapter, ModelError};

const EMBEDDING_STD: f64 = 0.02;
const POSITION_STD: f64 = 0.002;
const ADAPTER_DOWN_STD: f64 = 0.02;
const HEAD_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn resolve(store: &ParamStore, prefix: &str) -> Result<Self, ModelError> {
        Ok(Self {
            gain: lookup(store, &format!("{prefix}.gain"))?,
            bias: lookup(store, &format!("{prefix}.bias"))?,
        })
    }

    fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Result<Var, TensorError> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

/// Adapters at one insertion point, applied bottom to top.
#[derive(Debug, Clone, Copy)]
pub struct AdapterStack {
    pub pretrained: Option<HoulsbyAdapter>,
    pub task: HoulsbyAdapter,
}

impl AdapterStack {
    fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, mut x: Var) -> Result<Var, TensorError> {
        if let Some(p) = &self.pretrained {
            x = p.forward(g, store, x)?;
        }
        self.task.forward(g, store, x)
    }
}

#[derive(Debug, Clone)]
struct Block {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    attn_norm: Norm,
    inner: Linear,
    outer: Linear,
    ffn_norm: Norm,
    attn_adapters: Option<AdapterStack>,
    ffn_adapters: Option<AdapterStack>,
}

/// The frozen encoder backbone together with its adapters and classifier head.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    cfg: EncoderConfig,
    plan: AdapterPlan,
    seed: u64,
    store: ParamStore,
    roles: Vec<ParamRole>,
    token_embedding: ParamId,
    position_embedding: ParamId,
    embedding_norm: Norm,
    invertible: Option<InvertibleAdapter>,
    blocks: Vec<Block>,
    mlm_bias: ParamId,
    head: Linear,
}

/// Deterministic per-parameter stream: the same name and seed always
/// yield the same values, independently of which other parameters exist.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    z * std
}

/// Normal truncated at two standard deviations.
fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub(crate) fn init_tensor(spec: &ParamSpec, seed: u64) -> Tensor {
    let n = spec.numel();
    let name = spec.name.as_str();
    let mut rng = param_rng(seed, name);
    let data: Vec<f64> = if name.ends_with(".gain") {
        vec![1.0; n]
    } else if name.ends_with(".bias") {
        vec![0.0; n]
    } else if spec.role.is_adapter() {
        if name.ends_with(".up.weight") {
            vec![0.0; n]
        } else {
            (0..n).map(|_| truncated_normal(&mut rng, ADAPTER_DOWN_STD)).collect()
        }
    } else if name == "embeddings.position" {
        (0..n).map(|_| normal(&mut rng, POSITION_STD)).collect()
    } else if name.starts_with("embeddings.") {
        (0..n).map(|_| normal(&mut rng, EMBEDDING_STD)).collect()
    } else if spec.role == ParamRole::Head {
        (0..n).map(|_| normal(&mut rng, HEAD_STD)).collect()
    } else {
        let std = 1.0 / (spec.shape[0] as f64).sqrt();
        (0..n).map(|_| normal(&mut rng, std)).collect()
    };
    Tensor::new(spec.shape.clone(), data).expect("layout shapes are consistent")
}

fn adapter_stack(store: &ParamStore, plan: AdapterPlan, layer: usize, point: &str) -> Result<Option<AdapterStack>, ModelError> {
    if !plan.has_block_adapters() {
        return Ok(None);
    }
    let pretrained = if plan.has_pretrained() {
        Some(HoulsbyAdapter::resolve(store, &adapter_prefix(layer, point, "pretrained"))?)
    } else {
        None
    };
    Ok(Some(AdapterStack {
        pretrained,
        task: HoulsbyAdapter::resolve(store, &adapter_prefix(layer, point, "task"))?,
    }))
}

impl ModelGraph {
    /// Materializes a model for `plan`. Backbone values depend only on
    /// `(cfg, seed)`, so models with different plans share one backbone.
    pub fn new(cfg: EncoderConfig, plan: AdapterPlan, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let layout = ModelLayout::new(&cfg, plan);
        let mut store = ParamStore::new();
        let mut roles = Vec::with_capacity(layout.specs.len());
        for spec in &layout.specs {
            let tensor = init_tensor(spec, seed);
            store.insert(Parameter::new(spec.name.clone(), tensor, spec.role.frozen_by_default()));
            roles.push(spec.role);
        }
        let invertible = if plan.has_invertible() {
            Some(InvertibleAdapter::resolve(&store, "invertible", cfg.hidden)?)
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(cfg.layers);
        for layer in 0..cfg.layers {
            let p = format!("layers.{layer}");
            blocks.push(Block {
                query: Linear::resolve(&store, &format!("{p}.attention.query"))?,
                key: Linear::resolve(&store, &format!("{p}.attention.key"))?,
                value: Linear::resolve(&store, &format!("{p}.attention.value"))?,
                output: Linear::resolve(&store, &format!("{p}.attention.output"))?,
                attn_norm: Norm::resolve(&store, &format!("{p}.attention.norm"))?,
                inner: Linear::resolve(&store, &format!("{p}.ffn.inner"))?,
                outer: Linear::resolve(&store, &format!("{p}.ffn.outer"))?,
                ffn_norm: Norm::resolve(&store, &format!("{p}.ffn.norm"))?,
                attn_adapters: adapter_stack(&store, plan, layer, INSERTION_POINTS[0])?,
                ffn_adapters: adapter_stack(&store, plan, layer, INSERTION_POINTS[1])?,
            });
        }
        Ok(Self {
            token_embedding: lookup(&store, "embeddings.token")?,
            position_embedding: lookup(&store, "embeddings.position")?,
            embedding_norm: Norm::resolve(&store, "embeddings.norm")?,
            mlm_bias: lookup(&store, "mlm.bias")?,
            head: Linear::resolve(&store, "head")?,
            invertible,
            blocks,
            cfg,
            plan,
            seed,
            store,
            roles,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn plan(&self) -> AdapterPlan {
        self.plan
    }

    pub fn kind(&self) -> Option<ConfigKind> {
        match self.plan {
            AdapterPlan::None => None,
            AdapterPlan::Config(k) => Some(k),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn role(&self, id: ParamId) -> ParamRole {
        self.roles[id.index()]
    }

    pub fn ids_with_role(&self, role: ParamRole) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(id, _)| self.role(*id) == role)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn invertible(&self) -> Option<&InvertibleAdapter> {
        self.invertible.as_ref()
    }

    pub fn head(&self) -> Linear {
        self.head
    }

    /// Every adapter stack in insertion order (attention then ffn per block).
    pub fn adapter_stacks(&self) -> Vec<AdapterStack> {
        self.blocks
            .iter()
            .flat_map(|b| [b.attn_adapters, b.ffn_adapters])
            .flatten()
            .collect()
    }

    /// Trainable task adapters in insertion order.
    pub fn task_adapters(&self) -> Vec<HoulsbyAdapter> {
        self.adapter_stacks().into_iter().map(|s| s.task).collect()
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.store.get_mut(id).frozen = frozen;
    }

    /// Counts by the current frozen flags.
    pub fn count_parameters(&self) -> ParameterCounts {
        let mut c = ParameterCounts { frozen: 0, trainable: 0 };
        for (_, p) in self.store.iter() {
            if p.frozen {
                c.frozen += p.numel();
            } else {
                c.trainable += p.numel();
            }
        }
        c
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.trainable_ids()
    }

    /// Copies of every trainable tensor, for model selection.
    pub fn snapshot_trainable(&self) -> Vec<(ParamId, Tensor)> {
        self.trainable_ids()
            .into_iter()
            .map(|id| (id, self.store.get(id).tensor.clone()))
            .collect()
    }

    pub fn restore(&mut self, snapshot: &[(ParamId, Tensor)]) {
        for (id, t) in snapshot {
            self.store.get_mut(*id).tensor = t.clone();
        }
    }

    fn check_sequence(&self, seq: &TokenSequence) -> Result<(), ModelError> {
        if seq.ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if seq.ids.len() > self.cfg.max_len {
            return Err(ModelError::SequenceTooLong {
                len: seq.ids.len(),
                max_len: self.cfg.max_len,
            });
        }
        if seq.attention_mask.len() != seq.ids.len() {
            return Err(ModelError::MaskLength);
        }
        if let Some(&id) = seq.ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab_size: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    fn attention<'a>(&'a self, g: &mut Graph<'a>, block: &Block, h: Var, keep: &[bool]) -> Result<Var, TensorError> {
        let store = &self.store;
        let q = block.query.forward(g, store, h)?;
        let k = block.key.forward(g, store, h)?;
        let v = block.value.forward(g, store, h)?;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for head in 0..self.cfg.heads {
            let (lo, hi) = (head * dh, (head + 1) * dh);
            let qh = g.slice(q, 1, lo, hi)?;
            let kh = g.slice(k, 1, lo, hi)?;
            let vh = g.slice(v, 1, lo, hi)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let weights = g.masked_softmax(scores, keep)?;
            heads.push(g.matmul(weights, vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
        block.output.forward(g, store, merged)
    }

    /// Final hidden states (`n×d`) of one sequence.
    pub fn encode_sequence<'a>(&'a self, g: &mut Graph<'a>, seq: &TokenSequence) -> Result<Var, ModelError> {
        self.check_sequence(seq)?;
        let store = &self.store;
        let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let keep: Vec<bool> = seq.attention_mask.iter().map(|&m| m != 0).collect();

        let table = g.param(store, self.token_embedding);
        let pos_table = g.param(store, self.position_embedding);
        let tok = g.embedding(table, &ids)?;
        let pos = g.embedding(pos_table, &positions)?;
        let h = g.add(tok, pos)?;
        let mut h = self.embedding_norm.forward(g, store, h)?;
        if let Some(inv) = &self.invertible {
            h = inv.forward(g, store, h)?;
        }
        for block in &self.blocks {
            let mut a = self.attention(g, block, h, &keep)?;
            if let Some(stack) = &block.attn_adapters {
                a = stack.forward(g, store, a)?;
            }
            let r = g.add(h, a)?;
            h = block.attn_norm.forward(g, store, r)?;

            let f = block.inner.forward(g, store, h)?;
            let f = g.gelu(f);
            let mut f = block.outer.forward(g, store, f)?;
            if let Some(stack) = &block.ffn_adapters {
                f = stack.forward(g, store, f)?;
            }
            let r = g.add(h, f)?;
            h = block.ffn_norm.forward(g, store, r)?;
        }
        Ok(h)
    }

    /// Classifier logits (`batch×2`) recorded on `g`.
    pub fn logits_var<'a>(&'a self, g: &mut Graph<'a>, batch: &[TokenSequence]) -> Result<Var, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut cls_rows = Vec::with_capacity(batch.len());
        for seq in batch {
            let h = self.encode_sequence(g, seq)?;
            cls_rows.push(g.select_rows(h, &[0])?);
        }
        let cls = if cls_rows.len() == 1 {
            cls_rows[0]
        } else {
            g.concat(&cls_rows, 0)?
        };
        Ok(self.head.forward(g, &self.store, cls)?)
    }

    /// Classifier logits (`batch×2`).
    pub fn forward(&self, batch: &[TokenSequence]) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let z = self.logits_var(&mut g, batch)?;
        Ok(g.value(z).clone())
    }

    /// Vocabulary logits at `positions` of one sequence. The invertible
    /// adapter, when present, is undone before the tied output projection.
    pub fn mlm_logits_var<'a>(&'a self, g: &mut Graph<'a>, seq: &TokenSequence, positions: &[usize]) -> Result<Var, ModelError> {
        let mut h = self.encode_sequence(g, seq)?;
        if let Some(inv) = &self.invertible {
            h = inv.inverse(g, &self.store, h)?;
        }
        let rows = g.select_rows(h, positions)?;
        let table = g.param(&self.store, self.token_embedding);
        let bias = g.param(&self.store, self.mlm_bias);
        let logits = g.matmul_nt(rows, table)?;
        Ok(g.add_row(logits, bias)?)
    }

    /// SHA-256 over backbone parameter names, shapes and little-endian
    /// values in name order.
    pub fn backbone_fingerprint(&self) -> String {
        let mut backbone: Vec<&Parameter> = self
            .store
            .iter()
            .filter(|(id, _)| self.role(*id) == ParamRole::Backbone)
            .map(|(_, p)| p)
            .collect();
        backbone.sort_by(|a, b| a.name.cmp(&b.name));
        let mut h = Sha256::new();
        for p in backbone {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for &dim in p.tensor.shape() {
                h.update((dim as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
