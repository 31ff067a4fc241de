mod common;

use std::fs;

use adaptmatch::checkpoint::{
    load_adapters, load_backbone, manifest_path, save_adapters, save_backbone, storage_report, AdapterCheckpoint,
    CheckpointError, SaveOptions,
};
use adaptmatch::model::{build_model, ConfigKind, EncoderConfig, ParamRole};
use adaptmatch::tokenizer::TokenSequence;
use adaptmatch::train::{finetune, TrainConfig};
use common::{frozen_bytes, perturb, random_examples, random_seq, rng, small};

fn seqs(cfg: &EncoderConfig, n: usize) -> Vec<TokenSequence> {
    let mut r = rng(77);
    (0..n).map(|_| random_seq(&mut r, cfg)).collect()
}

#[test]
fn save_load_gives_bit_identical_logits() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [ConfigKind::TaskOnly, ConfigKind::InvertiblePlusTask] {
        let cfg = small(kind);
        let mut trained = build_model(cfg, 21, None).unwrap();
        let mut r = rng(3);
        for role in [ParamRole::TaskAdapter, ParamRole::Invertible, ParamRole::Head] {
            perturb(&mut trained, role, 0.1, &mut r);
        }
        let path = dir.path().join(format!("{}.aem", kind.as_str()));
        save_adapters(&trained, &path, SaveOptions::default()).unwrap();
        let mut fresh = build_model(cfg, 21, None).unwrap();
        load_adapters(&mut fresh, &path, false).unwrap();
        let input = seqs(&cfg, 16);
        let a = trained.forward(&input).unwrap();
        let b = fresh.forward(&input).unwrap();
        assert_eq!(a.to_le_bytes(), b.to_le_bytes(), "{kind:?}");
    }
}

#[test]
fn files_are_byte_deterministic_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_model(small(ConfigKind::TaskOnly), 4, None).unwrap();
    let (p1, p2) = (dir.path().join("a.aem"), dir.path().join("b.aem"));
    let n1 = save_adapters(&m, &p1, SaveOptions::default()).unwrap();
    save_adapters(&m, &p2, SaveOptions::default()).unwrap();
    let b1 = fs::read(&p1).unwrap();
    assert_eq!(b1.len() as u64, n1);
    assert_eq!(b1, fs::read(&p2).unwrap());
    assert_eq!(&b1[..4], b"AEM1");
    let manifest = fs::read_to_string(manifest_path(&p1)).unwrap();
    let ckpt = AdapterCheckpoint::read(&p1).unwrap();
    assert_eq!(manifest.lines().count(), ckpt.tensors.len());
    for (line, t) in manifest.lines().zip(&ckpt.tensors) {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols[0], t.name);
        let offset: usize = cols[2].parse().unwrap();
        let bytes: usize = cols[3].parse().unwrap();
        assert_eq!(bytes, t.tensor.len() * 8);
        assert_eq!(&b1[offset..offset + bytes], t.tensor.to_le_bytes().as_slice());
    }
}

#[test]
fn incompatible_checkpoint_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let wide = EncoderConfig {
        hidden: 64,
        ff_dim: 128,
        ..small(ConfigKind::TaskOnly)
    };
    let narrow = EncoderConfig {
        hidden: 32,
        ff_dim: 64,
        ..small(ConfigKind::TaskOnly)
    };
    let path = dir.path().join("wide.aem");
    save_adapters(&build_model(wide, 1, None).unwrap(), &path, SaveOptions::default()).unwrap();
    let mut target = build_model(narrow, 1, None).unwrap();
    let before = frozen_bytes(&target);
    let err = load_adapters(&mut target, &path, false).unwrap_err();
    assert!(matches!(err, CheckpointError::Incompatible(_)), "{err}");
    assert!(err.to_string().contains("64") && err.to_string().contains("32"), "{err}");
    assert_eq!(frozen_bytes(&target), before);

    let mut other_seed = build_model(wide, 2, None).unwrap();
    assert!(load_adapters(&mut other_seed, &path, false).is_err());

    let bb = dir.path().join("backbone.aem");
    save_backbone(&build_model(wide, 1, None).unwrap(), &bb).unwrap();
    assert!(matches!(
        load_adapters(&mut build_model(wide, 1, None).unwrap(), &bb, false),
        Err(CheckpointError::WrongKind { .. })
    ));
    fs::write(dir.path().join("junk.aem"), b"nope").unwrap();
    assert!(AdapterCheckpoint::read(&dir.path().join("junk.aem")).is_err());
    let mut bytes = fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(matches!(AdapterCheckpoint::decode(&bytes), Err(CheckpointError::Corrupt(_))));
}

#[test]
fn backbone_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(ConfigKind::TaskOnly);
    let m = build_model(cfg, 9, None).unwrap();
    let path = dir.path().join("bb.aem");
    save_backbone(&m, &path).unwrap();
    let mut other = build_model(cfg, 10, None).unwrap();
    assert_ne!(other.backbone_fingerprint(), m.backbone_fingerprint());
    load_backbone(&mut other, &path).unwrap();
    assert_eq!(other.backbone_fingerprint(), m.backbone_fingerprint());
}

#[test]
fn frozen_loaded_adapters_survive_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(ConfigKind::PretrainedPlusTask);
    let mut donor = build_model(cfg.with_kind(ConfigKind::TaskOnly), 6, None).unwrap();
    perturb(&mut donor, ParamRole::TaskAdapter, 0.1, &mut rng(1));
    let path = dir.path().join("pre.aem");
    save_adapters(&donor, &path, SaveOptions::default()).unwrap();

    let ckpt = AdapterCheckpoint::read(&path).unwrap();
    let model = build_model(cfg, 6, Some(&ckpt)).unwrap();
    for id in model.ids_with_role(ParamRole::PretrainedAdapter) {
        assert!(model.params().get(id).frozen);
    }
    let before = frozen_bytes(&model);
    let train = random_examples(&mut rng(2), &cfg, 100);
    let valid = random_examples(&mut rng(3), &cfg, 10);
    let tc = TrainConfig {
        learning_rates: vec![3e-4],
        batch_size: 10,
        epochs: 10,
        ..TrainConfig::finetune()
    };
    let out = finetune(&model, &train, &valid, &tc).unwrap();
    assert_eq!(out.report.runs[0].steps, 100);
    assert_eq!(frozen_bytes(&out.model), before);
}

#[test]
fn storage_ratio_at_desk_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = EncoderConfig {
        vocab_size: 2000,
        ..EncoderConfig::default()
    };
    let m = build_model(cfg, 42, None).unwrap();
    let (a, b) = (dir.path().join("adapters.aem"), dir.path().join("backbone.aem"));
    let an = save_adapters(&m, &a, SaveOptions::default()).unwrap();
    let bn = save_backbone(&m, &b).unwrap();
    let report = storage_report(&b, std::slice::from_ref(&a)).unwrap();
    assert_eq!(report.backbone_bytes, bn);
    assert_eq!(report.per_adapter_bytes, vec![an]);
    assert!(report.ratio < 0.13, "{}", report.ratio);
    assert!(report.ratio > 0.0);
    assert_eq!(storage_report(&b, &[]).unwrap().ratio, 0.0);
    assert!(storage_report(&dir.path().join("missing"), &[a]).is_err());
}
