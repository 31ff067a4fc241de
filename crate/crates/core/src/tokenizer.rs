//! Word-level vocabulary and sequence encoding with reserved special tokens.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

pub mod special {
    pub const PAD: &str = "[PAD]";
    pub const UNK: &str = "[UNK]";
    pub const CLS: &str = "[CLS]";
    pub const SEP: &str = "[SEP]";
    pub const MASK: &str = "[MASK]";
    pub const COL: &str = "[COL]";
    pub const VAL: &str = "[VAL]";

    /// Reserved tokens in id order.
    pub const RESERVED: [&str; 7] = [PAD, UNK, CLS, SEP, MASK, COL, VAL];

    pub const PAD_ID: u32 = 0;
    pub const UNK_ID: u32 = 1;
    pub const CLS_ID: u32 = 2;
    pub const SEP_ID: u32 = 3;
    pub const MASK_ID: u32 = 4;
    pub const COL_ID: u32 = 5;
    pub const VAL_ID: u32 = 6;

    pub fn is_reserved(token: &str) -> bool {
        RESERVED.contains(&token)
    }
}

use special::*;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary max size must exceed the 7 reserved tokens, got {0}")]
    TooSmall(usize),
    #[error("vocabulary file must start with the reserved tokens; line {line} is {found:?}")]
    BadReserved { line: usize, found: String },
    #[error("duplicate token {0:?} in vocabulary file")]
    Duplicate(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Bijective token ↔ id map; ids 0–6 are the reserved tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

/// Maps a raw whitespace token to its vocabulary key.
fn normalize(token: &str) -> String {
    if is_reserved(token) {
        token.to_string()
    } else {
        token.to_lowercase()
    }
}

impl Vocabulary {
    pub fn reserved_only() -> Self {
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string())).expect("reserved tokens are valid")
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self, VocabError> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        for (i, r) in RESERVED.iter().enumerate() {
            match tokens.get(i) {
                Some(t) if t == r => {}
                other => {
                    return Err(VocabError::BadReserved {
                        line: i,
                        found: other.cloned().unwrap_or_default(),
                    })
                }
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(VocabError::Duplicate(t.clone()));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Reserved tokens followed by the `max_size - 7` most frequent corpus
    /// tokens with frequency `>= min_freq`; ties break lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize, min_freq: usize) -> Result<Self, VocabError> {
        if max_size <= RESERVED.len() {
            return Err(VocabError::TooSmall(max_size));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for tok in line.as_ref().split_whitespace() {
                if !is_reserved(tok) {
                    *counts.entry(tok.to_lowercase()).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED.len());
        Self::from_tokens(
            RESERVED
                .iter()
                .map(|s| s.to_string())
                .chain(ranked.into_iter().map(|(t, _)| t)),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(&normalize(token)).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let io = |source| VocabError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(io)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = fs::read_to_string(path).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_tokens(text.lines().map(str::to_string))
    }
}

/// Token ids with their attention mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub max_len: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends `[PAD]` up to `len` (never beyond `max_len`).
    pub fn pad_to(&mut self, len: usize) {
        let len = len.min(self.max_len);
        while self.ids.len() < len {
            self.ids.push(PAD_ID);
            self.attention_mask.push(0);
        }
    }
}

/// Priority of a token for truncation: 0 = ordinary, 1 = field marker,
/// 2 = structural (`[CLS]`, `[SEP]`), which is never removed.
fn removal_tier(tok: &str) -> u8 {
    match tok {
        CLS | SEP => 2,
        t if is_reserved(t) && t != UNK => 1,
        _ => 0,
    }
}

/// Drops `excess` tokens, longest segment first, taking each segment's
/// trailing removable tokens. Returns keep flags.
fn truncation_plan(tokens: &[&str], mut excess: usize) -> Vec<bool> {
    let mut keep = vec![true; tokens.len()];
    let mut segment = Vec::with_capacity(tokens.len());
    let mut seg = 0usize;
    for t in tokens {
        segment.push(seg);
        if *t == SEP {
            seg += 1;
        }
    }
    let n_segments = seg + 1;
    for tier in 0..2u8 {
        if excess == 0 {
            break;
        }
        let mut avail = vec![0usize; n_segments];
        for (i, t) in tokens.iter().enumerate() {
            if keep[i] && removal_tier(t) == tier {
                avail[segment[i]] += 1;
            }
        }
        let mut remove = vec![0usize; n_segments];
        while excess > 0 {
            // ties go to the later segment
            let Some((s, _)) = avail
                .iter()
                .enumerate()
                .filter(|(_, &a)| a > 0)
                .max_by_key(|&(i, &a)| (a, i))
            else {
                break;
            };
            avail[s] -= 1;
            remove[s] += 1;
            excess -= 1;
        }
        for i in (0..tokens.len()).rev() {
            let s = segment[i];
            if remove[s] > 0 && keep[i] && removal_tier(tokens[i]) == tier {
                keep[i] = false;
                remove[s] -= 1;
            }
        }
    }
    keep
}

/// Maps whitespace tokens to ids (`[UNK]` when absent) and truncates to
/// `max_len` without ever dropping `[CLS]` or `[SEP]`.
pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let keep = if tokens.len() > max_len {
        truncation_plan(&tokens, tokens.len() - max_len)
    } else {
        vec![true; tokens.len()]
    };
    let ids: Vec<u32> = tokens
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(t, _)| vocab.id(t).unwrap_or(UNK_ID))
        .collect();
    let attention_mask = ids.iter().map(|&id| u8::from(id != PAD_ID)).collect();
    TokenSequence {
        ids,
        attention_mask,
        max_len,
    }
}

/// Space-joined tokens for the real (unmasked) positions.
pub fn decode(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    seq.ids
        .iter()
        .zip(&seq.attention_mask)
        .filter(|(_, &m)| m == 1)
        .map(|(&id, _)| vocab.token(id).unwrap_or(UNK))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frequency_order_then_lexicographic() {
        let v = Vocabulary::build(&["a a b"], 9, 1).unwrap();
        assert_eq!(&v.tokens()[7..], ["a", "b"]);
        let v = Vocabulary::build(&["x y", "y z"], 8, 1).unwrap();
        assert_eq!(&v.tokens()[7..], ["y"]);
    }

    #[test]
    fn empty_corpus_is_reserved_only() {
        let v = Vocabulary::build::<&str>(&[], 50, 1).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v, Vocabulary::reserved_only());
        assert!(matches!(Vocabulary::build(&["a"], 7, 1), Err(VocabError::TooSmall(7))));
    }

    #[test]
    fn reserved_ids_fixed() {
        let v = Vocabulary::reserved_only();
        for (i, t) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(t), Some(i as u32));
        }
    }

    #[test]
    fn min_freq_filters() {
        let v = Vocabulary::build(&["a a b"], 100, 2).unwrap();
        assert_eq!(&v.tokens()[7..], ["a"]);
    }

    #[test]
    fn direct_mapping_and_unk() {
        let v = Vocabulary::build(&["a b"], 20, 1).unwrap();
        let s = encode("[CLS] a [SEP] b [SEP]", &v, 16);
        assert_eq!(s.ids, vec![2, v.id("a").unwrap(), 3, v.id("b").unwrap(), 3]);
        assert_eq!(s.attention_mask, vec![1; 5]);
        let s = encode("[CLS] a zzz [SEP]", &v, 16);
        assert_eq!(s.ids[2], UNK_ID);
    }

    #[test]
    fn long_pair_truncates_to_max_len() {
        let left: Vec<String> = (0..300).map(|i| format!("l{i}")).collect();
        let right: Vec<String> = (0..297).map(|i| format!("r{i}")).collect();
        let text = format!("[CLS] {} [SEP] {} [SEP]", left.join(" "), right.join(" "));
        assert_eq!(text.split_whitespace().count(), 600);
        let corpus = [text.clone()];
        let v = Vocabulary::build(&corpus, 1000, 1).unwrap();
        let s = encode(&text, &v, 512);
        assert_eq!(s.len(), 512);
        assert_eq!(s.ids[0], CLS_ID);
        assert_eq!(s.ids.iter().filter(|&&i| i == SEP_ID).count(), 2);
        assert_eq!(*s.ids.last().unwrap(), SEP_ID);
        // longest-first: both segments end up at (512 - 3) / 2 tokens, ±1
        let first_sep = s.ids.iter().position(|&i| i == SEP_ID).unwrap();
        let left_len = first_sep - 1;
        let right_len = 512 - 3 - left_len;
        assert!(left_len.abs_diff(right_len) <= 1, "{left_len} vs {right_len}");
        // heads of both entities survive
        assert_eq!(s.ids[1], v.id("l0").unwrap());
        assert_eq!(s.ids[first_sep + 1], v.id("r0").unwrap());
    }

    #[test]
    fn markers_outlive_ordinary_tokens() {
        let v = Vocabulary::build(&["a b c"], 20, 1).unwrap();
        let s = encode("[CLS] [COL] a [VAL] b c [SEP]", &v, 5);
        assert_eq!(decode(&s, &v), "[CLS] [COL] a [VAL] [SEP]");
        let s = encode("[CLS] [COL] a [VAL] b c [SEP]", &v, 3);
        assert_eq!(decode(&s, &v), "[CLS] [COL] [SEP]");
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocabulary::build(&["Foo bar foo"], 20, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
        fs::write(&path, "a\nb\n").unwrap();
        assert!(matches!(Vocabulary::load(&path), Err(VocabError::BadReserved { .. })));
    }

    proptest! {
        #[test]
        fn truncation_keeps_structure(
            left in proptest::collection::vec("[a-e]{1,2}", 0..40),
            right in proptest::collection::vec("[a-e]{1,2}", 0..40),
            max_len in 3usize..60,
        ) {
            let text = format!("[CLS] {} [SEP] {} [SEP]", left.join(" "), right.join(" "));
            let v = Vocabulary::build(&[text.as_str()], 100, 1).unwrap();
            let s = encode(&text, &v, max_len);
            prop_assert!(s.len() <= max_len);
            prop_assert_eq!(s.ids[0], CLS_ID);
            prop_assert_eq!(s.ids.iter().filter(|&&i| i == SEP_ID).count(), 2);
            prop_assert!(s.ids.iter().all(|&i| (i as usize) < v.len()));
            // order preserved: output is a subsequence of the full encoding
            let full = encode(&text, &v, usize::MAX);
            let mut it = full.ids.iter();
            prop_assert!(s.ids.iter().all(|id| it.any(|x| x == id)));
            if text.split_whitespace().count() <= max_len {
                prop_assert_eq!(decode(&s, &v), text.split_whitespace().collect::<Vec<_>>().join(" "));
            }
        }
    }
}
