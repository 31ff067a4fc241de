use serde::{Deserialize, Serialize};

/// Binary matching metrics on the match class.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            tn,
        }
    }

    pub fn from_predictions(predicted: &[bool], actual: &[bool]) -> Self {
        assert_eq!(predicted.len(), actual.len(), "prediction and label counts differ");
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p, a) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        Self::from_counts(tp, fp, fn_, tn)
    }
}

/// Match iff the match logit is strictly larger; ties go to non-match.
pub fn predict_row(logits: &[f64]) -> bool {
    logits[1] > logits[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_cases() {
        let m = Metrics::from_counts(2, 1, 1, 0);
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        let perfect = Metrics::from_predictions(&[true, false, true], &[true, false, true]);
        assert_eq!(perfect.f1, 1.0);
        let none = Metrics::from_predictions(&[false, false], &[false, false]);
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn ties_are_non_matches() {
        assert!(!predict_row(&[0.3, 0.3]));
        assert!(predict_row(&[0.3, 0.31]));
        assert!(!predict_row(&[1.0 + 5.0, 0.5 + 5.0]));
    }
}
