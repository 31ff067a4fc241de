//! JSON-lines pair datasets and the synthetic planted-keyword generator.
//!
//! Each line holds `left`, `right` and an optional `label` (0/1 or a
//! boolean). Record kinds are inferred from JSON shape unless overridden.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::record::{encode_pair, Record, RecordError, RecordKind, SerializedPair, TreeNode};

/// The synthetic set shipped with the crate (`SyntheticConfig::default()`).
pub const BUNDLED_SYNTHETIC: &str = include_str!("../data/synthetic_gem.jsonl");

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON ({reason})")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: expected a JSON object")]
    NotAnObject { line: usize },
    #[error("line {line}: missing key {key:?}")]
    MissingKey { line: usize, key: &'static str },
    #[error("line {line}: label must be 0, 1, true or false")]
    BadLabel { line: usize },
    #[error("line {line}: {side} record: {source}")]
    Record {
        line: usize,
        side: &'static str,
        #[source]
        source: RecordError,
    },
    #[error("empty dataset")]
    Empty,
    #[error("line {line}: missing label")]
    Unlabeled { line: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub left: Record,
    pub right: Record,
    pub label: Option<bool>,
}

impl LabeledPair {
    pub fn serialize(&self) -> SerializedPair {
        encode_pair(&self.left, &self.right, self.label)
    }

    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("left".into(), self.left.to_json());
        obj.insert("right".into(), self.right.to_json());
        if let Some(l) = self.label {
            obj.insert("label".into(), json!(u8::from(l)));
        }
        Value::Object(obj)
    }
}

fn parse_label(v: &Value, line: usize) -> Result<Option<bool>, DatasetError> {
    match v {
        Value::Null => Ok(None),
        Value::Bool(b) => Ok(Some(*b)),
        Value::Number(n) => match n.as_f64() {
            Some(0.0) => Ok(Some(false)),
            Some(1.0) => Ok(Some(true)),
            _ => Err(DatasetError::BadLabel { line }),
        },
        _ => Err(DatasetError::BadLabel { line }),
    }
}

fn parse_record(v: &Value, kind: Option<RecordKind>, line: usize, side: &'static str) -> Result<Record, DatasetError> {
    match kind {
        Some(k) => Record::from_json_as(v, k),
        None => Record::from_json(v),
    }
    .map_err(|source| DatasetError::Record { line, side, source })
}

/// Parses JSON-lines text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_jsonl(text: &str, kind: Option<RecordKind>) -> Result<Vec<LabeledPair>, DatasetError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(raw).map_err(|e| DatasetError::Malformed {
            line,
            reason: e.to_string(),
        })?;
        let Value::Object(obj) = v else {
            return Err(DatasetError::NotAnObject { line });
        };
        let left = obj.get("left").ok_or(DatasetError::MissingKey { line, key: "left" })?;
        let right = obj.get("right").ok_or(DatasetError::MissingKey { line, key: "right" })?;
        let label = match obj.get("label") {
            Some(l) => parse_label(l, line)?,
            None => None,
        };
        out.push(LabeledPair {
            left: parse_record(left, kind, line, "left")?,
            right: parse_record(right, kind, line, "right")?,
            label,
        });
    }
    if out.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(out)
}

pub fn ingest_dataset(path: &Path, kind: Option<RecordKind>) -> Result<Vec<LabeledPair>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_jsonl(&text, kind)
}

/// Labels of every pair, failing on the first unlabeled line.
pub fn require_labels(pairs: &[LabeledPair]) -> Result<Vec<bool>, DatasetError> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| p.label.ok_or(DatasetError::Unlabeled { line: i + 1 }))
        .collect()
}

pub fn to_jsonl(pairs: &[LabeledPair]) -> String {
    let mut s = String::new();
    for p in pairs {
        s.push_str(&p.to_json().to_string());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub pairs: usize,
    pub positive_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            pairs: 1000,
            positive_fraction: 0.5,
            seed: 7,
        }
    }
}

const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 4] = ["", "n", "r", "x"];
const ANCHORS: usize = 4;
const DECOYS: usize = 4;

/// Deterministic two-syllable pseudo-words, all distinct.
fn lexicon() -> Vec<String> {
    let syllables: Vec<String> = ONSETS
        .iter()
        .flat_map(|o| VOWELS.iter().flat_map(move |v| CODAS.iter().map(move |c| format!("{o}{v}{c}"))))
        .collect();
    let mut words = Vec::new();
    for (i, a) in syllables.iter().enumerate() {
        let b = &syllables[(i * 31 + 11) % syllables.len()];
        words.push(format!("{a}{b}"));
    }
    words.sort();
    words.dedup();
    words
}

struct Vocab<'a> {
    anchors: &'a [String],
    decoys: &'a [String],
    fillers: &'a [String],
}

fn fillers(rng: &mut ChaCha8Rng, v: &Vocab<'_>, n: usize) -> Vec<String> {
    (0..n).map(|_| v.fillers.choose(rng).expect("non-empty").clone()).collect()
}

/// Words with `key` inserted anywhere except the last slot, so the key never
/// picks up a trailing comma when the value is flattened.
fn with_key(rng: &mut ChaCha8Rng, mut words: Vec<String>, key: &str) -> String {
    let at = rng.random_range(0..words.len().max(1));
    words.insert(at, key.to_string());
    words.join(" ")
}

fn make_record(rng: &mut ChaCha8Rng, v: &Vocab<'_>, kind: RecordKind, key: &str) -> Record {
    match kind {
        RecordKind::Structured => {
            let words = fillers(rng, v, 1);
            let title = with_key(rng, words, key);
            let brand = fillers(rng, v, 1).join(" ");
            Record::structured([("title", title), ("brand", brand)]).expect("fixed names")
        }
        RecordKind::SemiStructured => {
            let words = fillers(rng, v, 1);
            let name = with_key(rng, words, key);
            let tags = fillers(rng, v, 1).into_iter().map(TreeNode::Leaf);
            Record::semi_structured(TreeNode::map([(
                "product",
                TreeNode::map([("name", TreeNode::Leaf(name)), ("tags", TreeNode::list(tags))]),
            )]))
        }
        RecordKind::Text => {
            let n = rng.random_range(1..3);
            let words = fillers(rng, v, n);
            Record::text(with_key(rng, words, key))
        }
    }
}

const KINDS: [RecordKind; 3] = [RecordKind::Structured, RecordKind::SemiStructured, RecordKind::Text];

/// Pairs that match iff both sides carry the same planted anchor word.
/// Non-matching sides carry two different decoy words from a disjoint pool,
/// so the label is a function of which pool the planted words come from.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Vec<LabeledPair> {
    let words = lexicon();
    let v = Vocab {
        anchors: &words[..ANCHORS],
        decoys: &words[ANCHORS..ANCHORS + DECOYS],
        fillers: &words[ANCHORS + DECOYS..],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let positives = (cfg.pairs as f64 * cfg.positive_fraction).round() as usize;
    let mut labels: Vec<bool> = (0..cfg.pairs).map(|i| i < positives).collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            // Cycle the kind pairs so every combination is present.
            let lk = KINDS[i % 3];
            let rk = KINDS[(i / 3) % 3];
            let (lkey, rkey) = if label {
                let a = v.anchors.choose(&mut rng).expect("non-empty");
                (a, a)
            } else {
                let mut two = v.decoys.choose_multiple(&mut rng, 2);
                (two.next().expect("two decoys"), two.next().expect("two decoys"))
            };
            LabeledPair {
                left: make_record(&mut rng, &v, lk, lkey),
                right: make_record(&mut rng, &v, rk, rkey),
                label: Some(label),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_inference() {
        let p = parse_jsonl(r#"{"left": {"a": "1"}, "right": "text", "label": 1}"#, None).unwrap();
        assert_eq!((p[0].left.kind(), p[0].right.kind(), p[0].label), (RecordKind::Structured, RecordKind::Text, Some(true)));
        let p = parse_jsonl(r#"{"left": {"a": {"b": "1"}}, "right": {"c": "2"}, "label": 0}"#, None).unwrap();
        assert_eq!(
            (p[0].left.kind(), p[0].right.kind(), p[0].label),
            (RecordKind::SemiStructured, RecordKind::Structured, Some(false))
        );
    }

    #[test]
    fn kind_override() {
        let p = parse_jsonl(r#"{"left": {"a": "1"}, "right": {"b": "2"}}"#, Some(RecordKind::SemiStructured)).unwrap();
        assert_eq!(p[0].left.kind(), RecordKind::SemiStructured);
        assert_eq!(p[0].label, None);
        let err = parse_jsonl(r#"{"left": {"a": "1"}, "right": "x"}"#, Some(RecordKind::Text)).unwrap_err();
        assert!(err.to_string().starts_with("line 1: left record"), "{err}");
    }

    #[test]
    fn errors_name_the_line() {
        let err = parse_jsonl("not json", None).unwrap_err();
        assert!(err.to_string().starts_with("line 1: malformed"), "{err}");
        let err = parse_jsonl("\n{\"left\": \"a\"}", None).unwrap_err();
        assert_eq!(err.to_string(), "line 2: missing key \"right\"");
        let err = parse_jsonl(r#"{"left": "a", "right": "b", "label": 2}"#, None).unwrap_err();
        assert!(matches!(err, DatasetError::BadLabel { line: 1 }));
        assert_eq!(parse_jsonl("\n  \n", None).unwrap_err().to_string(), "empty dataset");
    }

    #[test]
    fn synthetic_is_deterministic_and_round_trips() {
        let cfg = SyntheticConfig {
            pairs: 60,
            ..SyntheticConfig::default()
        };
        let a = generate_synthetic(&cfg);
        assert_eq!(a, generate_synthetic(&cfg));
        assert_eq!(a.iter().filter(|p| p.label == Some(true)).count(), 30);
        let back = parse_jsonl(&to_jsonl(&a), None).unwrap();
        assert_eq!(back, a);
        for kind in KINDS {
            assert!(a.iter().any(|p| p.left.kind() == kind));
            assert!(a.iter().any(|p| p.right.kind() == kind));
        }
    }

    #[test]
    fn planted_words_decide_the_label() {
        let words = lexicon();
        assert!(words.len() > ANCHORS + DECOYS + 50);
        let anchors = &words[..ANCHORS];
        for p in generate_synthetic(&SyntheticConfig::default()) {
            let s = p.serialize();
            let toks: Vec<&str> = s.text.split_whitespace().collect();
            let has_anchor = toks.iter().any(|t| anchors.iter().any(|a| a == t));
            assert_eq!(Some(has_anchor), p.label, "{}", s.text);
        }
    }

    #[test]
    fn bundled_file_matches_generator() {
        let bundled = parse_jsonl(BUNDLED_SYNTHETIC, None).unwrap();
        assert_eq!(bundled, generate_synthetic(&SyntheticConfig::default()));
    }
}
