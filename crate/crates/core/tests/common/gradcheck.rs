use adaptmatch::model::{build_model, ConfigKind, EncoderConfig, ModelGraph, ParamRole};
use adaptmatch::tensor::{Graph, ParamId, Tensor};
use adaptmatch::tokenizer::TokenSequence;

use super::{perturb, random_seq, rng, tiny};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub struct Batch {
    pub seqs: Vec<TokenSequence>,
    pub labels: Vec<usize>,
    /// Masked positions and targets for the MLM loss, one entry per sequence.
    pub masked: Vec<(Vec<usize>, Vec<usize>)>,
}

pub fn batch(cfg: &EncoderConfig, seed: u64) -> Batch {
    let mut r = rng(seed);
    let seqs: Vec<TokenSequence> = (0..4).map(|_| random_seq(&mut r, cfg)).collect();
    let masked = seqs
        .iter()
        .map(|s| {
            let real = s.attention_mask.iter().filter(|&&m| m == 1).count();
            let pos: Vec<usize> = (1..real).step_by(2).collect();
            let tgt = pos.iter().map(|&p| s.ids[p] as usize).collect();
            (pos, tgt)
        })
        .collect();
    Batch {
        seqs,
        labels: vec![0, 1, 1, 0],
        masked,
    }
}

#[derive(Clone, Copy)]
pub enum Loss {
    Classify,
    Mlm,
}

pub fn loss_and_grads(model: &ModelGraph, b: &Batch, which: Loss, grads: bool) -> (f64, Vec<(ParamId, Tensor)>) {
    let mut g = Graph::new();
    let loss = match which {
        Loss::Classify => {
            let z = model.logits_var(&mut g, &b.seqs).unwrap();
            g.cross_entropy(z, &b.labels).unwrap()
        }
        Loss::Mlm => {
            let mut parts = Vec::new();
            let mut targets = Vec::new();
            for (s, (pos, tgt)) in b.seqs.iter().zip(&b.masked) {
                if pos.is_empty() {
                    continue;
                }
                parts.push(model.mlm_logits_var(&mut g, s, pos).unwrap());
                targets.extend(tgt);
            }
            let z = g.concat(&parts, 0).unwrap();
            g.cross_entropy(z, &targets).unwrap()
        }
    };
    let value = g.value(loss).item();
    if !grads {
        return (value, Vec::new());
    }
    g.backward(loss).unwrap();
    (value, g.take_param_grads())
}

/// Relative error of every trainable tensor's analytic gradient against
/// central differences; returns (name, error) pairs.
pub fn check_model(model: &ModelGraph, b: &Batch, which: Loss) -> Vec<(String, f64)> {
    let (_, analytic) = loss_and_grads(model, b, which, true);
    let mut out = Vec::new();
    for id in model.trainable_ids() {
        let name = model.params().get(id).name.clone();
        let Some((_, a)) = analytic.iter().find(|(i, _)| *i == id) else {
            out.push((name, f64::INFINITY));
            continue;
        };
        let mut probe = model.clone();
        let mut numeric = vec![0.0; a.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.params().get(id).tensor.data()[k];
            probe.params_mut().get_mut(id).tensor.data_mut()[k] = orig + H;
            let up = loss_and_grads(&probe, b, which, false).0;
            probe.params_mut().get_mut(id).tensor.data_mut()[k] = orig - H;
            let down = loss_and_grads(&probe, b, which, false).0;
            probe.params_mut().get_mut(id).tensor.data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * H);
        }
        let diff = a.data().iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a
            .data()
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|x| x * x).sum::<f64>().sqrt());
        out.push((name, if scale == 0.0 { diff } else { diff / scale }));
    }
    out
}

pub fn prepared(kind: ConfigKind) -> ModelGraph {
    let cfg = tiny(kind);
    let pre = (kind == ConfigKind::PretrainedPlusTask).then(|| {
        let mut donor = build_model(cfg.with_kind(ConfigKind::TaskOnly), 3, None).unwrap();
        perturb(&mut donor, ParamRole::TaskAdapter, 0.2, &mut rng(5));
        adaptmatch::checkpoint::AdapterCheckpoint::from_model(&donor, Default::default())
    });
    let mut m = build_model(cfg, 3, pre.as_ref()).unwrap();
    let mut r = rng(11);
    for role in [ParamRole::TaskAdapter, ParamRole::Invertible, ParamRole::Head] {
        perturb(&mut m, role, 0.2, &mut r);
    }
    m
}

pub fn assert_all_close(results: &[(String, f64)], expect_classes: &[&str]) {
    for (name, err) in results {
        assert!(*err <= TOL, "{name}: relative error {err:e}");
    }
    for class in expect_classes {
        assert!(
            results.iter().any(|(n, _)| n.contains(class)),
            "no trainable tensor matching {class}"
        );
    }
}
