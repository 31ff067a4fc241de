#![allow(dead_code)]

pub mod gradcheck;

use adaptmatch::model::{ConfigKind, EncoderConfig, ModelGraph, ParamRole};
use adaptmatch::tensor::Tensor;
use adaptmatch::tokenizer::TokenSequence;
use adaptmatch::train::Example;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny(kind: ConfigKind) -> EncoderConfig {
    EncoderConfig {
        hidden: 16,
        layers: 1,
        heads: 2,
        ff_dim: 32,
        vocab_size: 30,
        max_len: 8,
        bottleneck: 4,
        kind,
    }
}

pub fn small(kind: ConfigKind) -> EncoderConfig {
    EncoderConfig {
        hidden: 16,
        layers: 2,
        heads: 2,
        ff_dim: 32,
        vocab_size: 40,
        max_len: 12,
        bottleneck: 4,
        kind,
    }
}

/// `[CLS]` followed by ordinary ids, right padded.
pub fn random_seq(rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> TokenSequence {
    let n = cfg.max_len;
    let real = rng.random_range(2..=n);
    let mut ids: Vec<u32> = (0..n).map(|_| rng.random_range(7..cfg.vocab_size as u32)).collect();
    ids[0] = 2;
    let mut mask = vec![1u8; n];
    for i in real..n {
        ids[i] = 0;
        mask[i] = 0;
    }
    TokenSequence {
        ids,
        attention_mask: mask,
        max_len: n,
    }
}

pub fn random_examples(rng: &mut ChaCha8Rng, cfg: &EncoderConfig, n: usize) -> Vec<Example> {
    (0..n)
        .map(|i| Example {
            seq: random_seq(rng, cfg),
            label: i % 2 == 0,
        })
        .collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Overwrites every parameter with `role` with uniform noise.
pub fn perturb(model: &mut ModelGraph, role: ParamRole, scale: f64, rng: &mut ChaCha8Rng) {
    for id in model.ids_with_role(role) {
        let shape = model.params().get(id).tensor.shape().to_vec();
        model.params_mut().get_mut(id).tensor = random_tensor(rng, &shape, scale);
    }
}

/// Raw bytes of every frozen parameter, by name.
pub fn frozen_bytes(model: &ModelGraph) -> Vec<(String, Vec<u8>)> {
    model
        .params()
        .iter()
        .filter(|(_, p)| p.frozen)
        .map(|(_, p)| (p.name.clone(), p.tensor.to_le_bytes()))
        .collect()
}
