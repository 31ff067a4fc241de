//! Adapter-only checkpoints and the shared backbone file.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "AEM1" | version: u32 | meta_len: u32 | metadata (JSON, meta_len bytes)
//! | count: u32 | count × { name_len: u32 | name | rank: u32 | dims: u64 × rank | values: f64 × numel }
//! ```
//!
//! A plain-text `<file>.manifest` sidecar lists `name<TAB>shape<TAB>offset<TAB>bytes`
//! per tensor, where `offset` is the absolute byte offset of the values.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ConfigKind, EncoderConfig, ModelGraph, ParamRole};
use crate::tensor::{ParamId, Tensor};

pub const MAGIC: &[u8; 4] = b"AEM1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("expected a {expected:?} checkpoint, found {found:?}")]
    WrongKind {
        expected: CheckpointKind,
        found: CheckpointKind,
    },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("incompatible checkpoint: tensor {name} has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint tensor {0} has no slot in this model")]
    UnknownTensor(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Adapters,
    Backbone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub kind: CheckpointKind,
    pub backbone_fingerprint: String,
    pub hidden: usize,
    pub bottleneck: usize,
    pub layers: usize,
    pub config_kind: Option<ConfigKind>,
    pub encoder: EncoderConfig,
    /// Adapter slot prefixes stored in the file, in model order.
    pub insertion_map: Vec<String>,
    pub seed: u64,
    pub includes_head: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterCheckpoint {
    pub metadata: CheckpointMetadata,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SaveOptions {
    pub include_head: bool,
}

impl Default for SaveOptions {
    fn default() -> Self {
        Self { include_head: true }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Slot prefix of an adapter tensor name (`layers.0.ffn.adapter.task`).
fn slot_prefix(name: &str) -> Option<String> {
    if name.starts_with("invertible.") {
        return Some("invertible".into());
    }
    let idx = name.find(".adapter.")?;
    let rest = &name[idx + ".adapter.".len()..];
    let slot = rest.split('.').next()?;
    Some(format!("{}.adapter.{slot}", &name[..idx]))
}

fn metadata_for(model: &ModelGraph, kind: CheckpointKind, names: &[&str], includes_head: bool) -> CheckpointMetadata {
    let cfg = *model.config();
    let mut insertion_map: Vec<String> = Vec::new();
    for n in names {
        if let Some(p) = slot_prefix(n) {
            if !insertion_map.contains(&p) {
                insertion_map.push(p);
            }
        }
    }
    CheckpointMetadata {
        kind,
        backbone_fingerprint: model.backbone_fingerprint(),
        hidden: cfg.hidden,
        bottleneck: cfg.bottleneck,
        layers: cfg.layers,
        config_kind: model.kind(),
        encoder: cfg,
        insertion_map,
        seed: model.seed(),
        includes_head,
    }
}

fn collect(model: &ModelGraph, ids: &[ParamId]) -> Vec<NamedTensor> {
    ids.iter()
        .map(|&id| {
            let p = model.params().get(id);
            NamedTensor {
                name: p.name.clone(),
                tensor: p.tensor.clone(),
            }
        })
        .collect()
}

impl AdapterCheckpoint {
    /// The trainable adapter (and optionally head) tensors of `model`.
    pub fn from_model(model: &ModelGraph, opts: SaveOptions) -> Self {
        let ids: Vec<ParamId> = model
            .trainable_ids()
            .into_iter()
            .filter(|&id| match model.role(id) {
                ParamRole::Backbone => false,
                ParamRole::Head => opts.include_head,
                _ => true,
            })
            .collect();
        let tensors = collect(model, &ids);
        let names: Vec<&str> = tensors.iter().map(|t| t.name.as_str()).collect();
        let metadata = metadata_for(model, CheckpointKind::Adapters, &names, opts.include_head);
        Self { metadata, tensors }
    }

    /// Tensors of `model` whose role is one of `roles`, frozen or not.
    /// Backbone tensors are never included.
    pub fn with_roles(model: &ModelGraph, roles: &[ParamRole]) -> Self {
        let ids: Vec<ParamId> = model
            .params()
            .iter()
            .map(|(id, _)| id)
            .filter(|&id| roles.contains(&model.role(id)) && model.role(id) != ParamRole::Backbone)
            .collect();
        let tensors = collect(model, &ids);
        let names: Vec<&str> = tensors.iter().map(|t| t.name.as_str()).collect();
        let includes_head = roles.contains(&ParamRole::Head);
        let metadata = metadata_for(model, CheckpointKind::Adapters, &names, includes_head);
        Self { metadata, tensors }
    }

    /// Every backbone tensor of `model`.
    pub fn backbone_of(model: &ModelGraph) -> Self {
        let ids = model.ids_with_role(ParamRole::Backbone);
        let tensors = collect(model, &ids);
        let metadata = metadata_for(model, CheckpointKind::Backbone, &[], false);
        Self { metadata, tensors }
    }

    pub fn payload_bytes(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.len() * 8).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    /// Serialized bytes plus manifest lines.
    pub fn encode(&self) -> Result<(Vec<u8>, String), CheckpointError> {
        let meta = serde_json::to_vec(&self.metadata)?;
        let mut buf = Vec::with_capacity(64 + meta.len() + self.payload_bytes());
        let mut manifest = String::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(t.name.as_bytes());
            let shape = t.tensor.shape();
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let offset = buf.len();
            buf.extend_from_slice(&t.tensor.to_le_bytes());
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            manifest.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                t.name,
                dims.join("x"),
                offset,
                t.tensor.len() * 8
            ));
        }
        Ok((buf, manifest))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let meta_len = r.u32()? as usize;
        let metadata: CheckpointMetadata = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| CheckpointError::Corrupt("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            tensors.push(NamedTensor { name, tensor });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { metadata, tensors })
    }

    /// Writes the checkpoint and its manifest atomically; returns the
    /// checkpoint file size.
    pub fn write(&self, path: &Path) -> Result<u64, CheckpointError> {
        let (bytes, manifest) = self.encode()?;
        write_atomic(path, &bytes)?;
        write_atomic(&manifest_path(path), manifest.as_bytes())?;
        Ok(bytes.len() as u64)
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Corrupt("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Saves the trainable adapter partition (plus head unless excluded).
pub fn save_adapters(model: &ModelGraph, path: &Path, opts: SaveOptions) -> Result<u64, CheckpointError> {
    AdapterCheckpoint::from_model(model, opts).write(path)
}

pub fn save_backbone(model: &ModelGraph, path: &Path) -> Result<u64, CheckpointError> {
    AdapterCheckpoint::backbone_of(model).write(path)
}

fn check_compatible(model: &ModelGraph, meta: &CheckpointMetadata) -> Result<(), CheckpointError> {
    let cfg = model.config();
    if meta.hidden != cfg.hidden {
        return Err(CheckpointError::Incompatible(format!(
            "hidden size {} in checkpoint, {} in model",
            meta.hidden, cfg.hidden
        )));
    }
    if meta.layers != cfg.layers {
        return Err(CheckpointError::Incompatible(format!(
            "{} layers in checkpoint, {} in model",
            meta.layers, cfg.layers
        )));
    }
    let fp = model.backbone_fingerprint();
    if meta.backbone_fingerprint != fp {
        return Err(CheckpointError::Incompatible(format!(
            "backbone fingerprint {} does not match model backbone {}",
            meta.backbone_fingerprint, fp
        )));
    }
    Ok(())
}

/// Copies checkpoint tensors into `model`.
///
/// With `freeze`, block adapters go to the frozen lower slot of a
/// pretrained-plus-task model (or stay in the task slot, frozen, for other
/// configurations) and head tensors are skipped. Without `freeze` they
/// become trainable task adapters and the head is restored.
pub fn apply_checkpoint(model: &mut ModelGraph, ckpt: &AdapterCheckpoint, freeze: bool) -> Result<(), CheckpointError> {
    if ckpt.metadata.kind != CheckpointKind::Adapters {
        return Err(CheckpointError::WrongKind {
            expected: CheckpointKind::Adapters,
            found: ckpt.metadata.kind,
        });
    }
    check_compatible(model, &ckpt.metadata)?;
    let to_pretrained = freeze && model.plan().has_pretrained();
    let mut updates: Vec<(ParamId, Tensor)> = Vec::new();
    let mut block_slot_filled = false;
    for t in &ckpt.tensors {
        if freeze && t.name.starts_with("head.") {
            continue;
        }
        let name = if to_pretrained {
            t.name.replace(".adapter.task.", ".adapter.pretrained.")
        } else {
            t.name.clone()
        };
        let id = model
            .params()
            .id(&name)
            .ok_or_else(|| CheckpointError::UnknownTensor(t.name.clone()))?;
        let role = model.role(id);
        if role == ParamRole::Backbone {
            return Err(CheckpointError::UnknownTensor(t.name.clone()));
        }
        let expected = model.params().get(id).tensor.shape();
        if expected != t.tensor.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: t.name.clone(),
                expected: expected.to_vec(),
                found: t.tensor.shape().to_vec(),
            });
        }
        block_slot_filled |= matches!(role, ParamRole::TaskAdapter | ParamRole::PretrainedAdapter);
        updates.push((id, t.tensor.clone()));
    }
    if block_slot_filled {
        let target = if to_pretrained {
            ParamRole::PretrainedAdapter
        } else {
            ParamRole::TaskAdapter
        };
        for id in model.ids_with_role(target) {
            if !updates.iter().any(|(u, _)| *u == id) {
                return Err(CheckpointError::MissingTensor(model.params().get(id).name.clone()));
            }
        }
    } else if to_pretrained {
        return Err(CheckpointError::MissingTensor(
            model.ids_with_role(ParamRole::PretrainedAdapter)
                .first()
                .map(|&id| model.params().get(id).name.clone())
                .unwrap_or_default(),
        ));
    }
    for (id, tensor) in updates {
        let adapter = model.role(id).is_adapter();
        let p = model.params_mut().get_mut(id);
        p.tensor = tensor;
        p.grad = None;
        if adapter {
            p.frozen = freeze;
        }
    }
    Ok(())
}

pub fn load_adapters(model: &mut ModelGraph, path: &Path, freeze: bool) -> Result<(), CheckpointError> {
    let ckpt = AdapterCheckpoint::read(path)?;
    apply_checkpoint(model, &ckpt, freeze)
}

/// Replaces backbone values from a backbone file, verifying its fingerprint.
pub fn load_backbone(model: &mut ModelGraph, path: &Path) -> Result<(), CheckpointError> {
    let ckpt = AdapterCheckpoint::read(path)?;
    if ckpt.metadata.kind != CheckpointKind::Backbone {
        return Err(CheckpointError::WrongKind {
            expected: CheckpointKind::Backbone,
            found: ckpt.metadata.kind,
        });
    }
    let cfg = model.config();
    if ckpt.metadata.hidden != cfg.hidden || ckpt.metadata.layers != cfg.layers {
        return Err(CheckpointError::Incompatible(format!(
            "backbone file is d={} L={}, model is d={} L={}",
            ckpt.metadata.hidden, ckpt.metadata.layers, cfg.hidden, cfg.layers
        )));
    }
    let backbone = model.ids_with_role(ParamRole::Backbone);
    for &id in &backbone {
        let name = model.params().get(id).name.clone();
        let t = ckpt.get(&name).ok_or(CheckpointError::MissingTensor(name.clone()))?;
        let expected = model.params().get(id).tensor.shape();
        if expected != t.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: expected.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        model.params_mut().get_mut(id).tensor = t.clone();
    }
    if ckpt.tensors.len() != backbone.len() {
        return Err(CheckpointError::Incompatible(format!(
            "backbone file holds {} tensors, model has {}",
            ckpt.tensors.len(),
            backbone.len()
        )));
    }
    let fp = model.backbone_fingerprint();
    if fp != ckpt.metadata.backbone_fingerprint {
        return Err(CheckpointError::Incompatible(format!(
            "backbone fingerprint {} does not match recorded {}",
            fp, ckpt.metadata.backbone_fingerprint
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StorageReport {
    pub backbone_bytes: u64,
    pub per_adapter_bytes: Vec<u64>,
    /// Mean adapter size over backbone size; 0 with no adapters.
    pub ratio: f64,
}

pub fn storage_report(backbone_path: &Path, adapter_paths: &[PathBuf]) -> Result<StorageReport, CheckpointError> {
    let size = |p: &Path| fs::metadata(p).map(|m| m.len()).map_err(io_err(p));
    let backbone_bytes = size(backbone_path)?;
    let per_adapter_bytes = adapter_paths
        .iter()
        .map(|p| size(p))
        .collect::<Result<Vec<_>, _>>()?;
    let ratio = if per_adapter_bytes.is_empty() || backbone_bytes == 0 {
        0.0
    } else {
        let mean = per_adapter_bytes.iter().sum::<u64>() as f64 / per_adapter_bytes.len() as f64;
        mean / backbone_bytes as f64
    };
    Ok(StorageReport {
        backbone_bytes,
        per_adapter_bytes,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_backbone_only, build_model, ConfigKind, EncoderConfig};

    fn small() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 50,
            max_len: 16,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn desk_payload_matches_formula() {
        let model = build_model(EncoderConfig::default(), 1, None).unwrap();
        let ckpt = AdapterCheckpoint::from_model(&model, SaveOptions::default());
        assert_eq!(ckpt.payload_bytes(), (4 * 1096 + 130) * 8);
        assert_eq!(ckpt.payload_bytes(), 36_112);
        assert!(ckpt.tensors.iter().all(|t| {
            let id = model.params().id(&t.name).unwrap();
            model.role(id) != ParamRole::Backbone
        }));
        let no_head = AdapterCheckpoint::from_model(&model, SaveOptions { include_head: false });
        assert_eq!(no_head.payload_bytes(), 4 * 1096 * 8);
        assert_eq!(ckpt.metadata.insertion_map.len(), 4);
    }

    #[test]
    fn backbone_only_checkpoint_holds_head() {
        let model = build_backbone_only(small(), 1).unwrap();
        let ckpt = AdapterCheckpoint::from_model(&model, SaveOptions::default());
        let names: Vec<_> = ckpt.tensors.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["head.weight", "head.bias"]);
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(matches!(AdapterCheckpoint::decode(b"NOPE...."), Err(CheckpointError::BadMagic)));
        let model = build_model(small(), 1, None).unwrap();
        let (bytes, _) = AdapterCheckpoint::from_model(&model, SaveOptions::default()).encode().unwrap();
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(AdapterCheckpoint::decode(&bad), Err(CheckpointError::UnsupportedVersion(9))));
        assert!(matches!(
            AdapterCheckpoint::decode(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Corrupt(_))
        ));
    }

    #[test]
    fn manifest_offsets_point_at_values() {
        let model = build_model(small(), 4, None).unwrap();
        let ckpt = AdapterCheckpoint::from_model(&model, SaveOptions::default());
        let (bytes, manifest) = ckpt.encode().unwrap();
        for (line, t) in manifest.lines().zip(&ckpt.tensors) {
            let cols: Vec<_> = line.split('\t').collect();
            assert_eq!(cols[0], t.name);
            let off: usize = cols[2].parse().unwrap();
            let len: usize = cols[3].parse().unwrap();
            assert_eq!(&bytes[off..off + len], t.tensor.to_le_bytes().as_slice());
        }
    }

    #[test]
    fn pretrained_needs_checkpoint() {
        let cfg = small().with_kind(ConfigKind::PretrainedPlusTask);
        assert!(matches!(build_model(cfg, 1, None), Err(crate::model::ModelError::MissingPretrained)));
    }

    #[test]
    fn slot_prefixes() {
        assert_eq!(
            slot_prefix("layers.1.ffn.adapter.task.up.weight").as_deref(),
            Some("layers.1.ffn.adapter.task")
        );
        assert_eq!(slot_prefix("invertible.f.down.bias").as_deref(), Some("invertible"));
        assert_eq!(slot_prefix("head.weight"), None);
    }
}
