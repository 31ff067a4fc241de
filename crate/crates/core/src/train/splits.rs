use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;

pub const VALID_FRACTION: f64 = 0.2;
pub const TEST_FRACTION: f64 = 0.2;

/// Indices into the labeled set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Stratified split. Validation and test parts take fixed fractions of each
/// class and do not depend on `rate`. The training part keeps
/// `round_half_up(rate × class size)` examples of each class, capped at what
/// remains after validation and test, so `rate = 1` keeps everything left.
pub fn make_splits(labels: &[bool], rate: f64, seed: u64) -> Result<Splits, TrainError> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(TrainError::InvalidRate(rate));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Splits {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_valid = round_half_up(n as f64 * VALID_FRACTION);
        let n_test = round_half_up(n as f64 * TEST_FRACTION).min(n - n_valid);
        let pool = n - n_valid - n_test;
        let n_train = round_half_up(n as f64 * rate).min(pool);
        out.valid.extend_from_slice(&idx[..n_valid]);
        out.test.extend_from_slice(&idx[n_valid..n_valid + n_test]);
        out.train.extend_from_slice(&idx[n_valid + n_test..n_valid + n_test + n_train]);
    }
    for part in [&mut out.train, &mut out.valid, &mut out.test] {
        part.sort_unstable();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(pos: usize, neg: usize) -> Vec<bool> {
        (0..pos + neg).map(|i| i % 8 == 0 && i / 8 < pos).collect::<Vec<_>>()
    }

    #[test]
    fn low_resource_counts() {
        let mut l = vec![false; 567];
        for v in l.iter_mut().take(70) {
            *v = true;
        }
        let s = make_splits(&l, 0.1, 1).unwrap();
        let pos = s.train.iter().filter(|&&i| l[i]).count();
        assert_eq!((pos, s.train.len() - pos), (7, 50));
        let full = make_splits(&l, 1.0, 1).unwrap();
        assert_eq!(full.valid, s.valid);
        assert_eq!(full.test, s.test);
        assert_eq!(full.train.len() + full.valid.len() + full.test.len(), 567);
        assert!(s.train.iter().all(|i| full.train.contains(i)));
    }

    #[test]
    fn deterministic_and_disjoint() {
        let l = labels(30, 170);
        let a = make_splits(&l, 0.5, 9).unwrap();
        assert_eq!(a, make_splits(&l, 0.5, 9).unwrap());
        assert_ne!(a, make_splits(&l, 0.5, 10).unwrap());
        let mut all: Vec<_> = a.train.iter().chain(&a.valid).chain(&a.test).copied().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn rate_bounds() {
        let l = labels(3, 7);
        for r in [0.0, -0.1, 1.01, f64::NAN] {
            assert!(matches!(make_splits(&l, r, 0), Err(TrainError::InvalidRate(_))));
        }
    }
}
