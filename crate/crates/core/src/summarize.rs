//! TF-IDF token selection for over-long serialized entities.
//!
//! Field markers and attribute names are always kept. Every value-token
//! occurrence is scored by its smoothed inverse document frequency
//! `ln((1 + N) / (1 + df)) + 1`, and the highest-scoring occurrences that
//! fit the budget survive in their original order. Summed over the kept
//! occurrences this is the tf-idf mass of the summary, so the rule keeps
//! the summary with the largest tf-idf mass. Score ties go to the earlier
//! position.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::record::SerializedEntity;
use crate::tokenizer::special::{self, COL, VAL};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SummarizeError {
    #[error("infeasible budget: {budget} tokens requested but {mandatory} markers and attribute names must be kept")]
    InfeasibleBudget { budget: usize, mandatory: usize },
}

/// Document frequencies of lowercased whitespace tokens.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DocumentFrequencies {
    documents: usize,
    df: HashMap<String, usize>,
}

impl DocumentFrequencies {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_corpus<'a>(docs: impl IntoIterator<Item = &'a SerializedEntity>) -> Self {
        let mut stats = Self::new();
        for d in docs {
            stats.add(d);
        }
        stats
    }

    pub fn add(&mut self, doc: &SerializedEntity) {
        self.documents += 1;
        let seen: HashSet<String> = doc.tokens().map(str::to_lowercase).collect();
        for t in seen {
            *self.df.entry(t).or_default() += 1;
        }
    }

    pub fn documents(&self) -> usize {
        self.documents
    }

    pub fn df(&self, token: &str) -> usize {
        self.df.get(&token.to_lowercase()).copied().unwrap_or(0)
    }

    pub fn idf(&self, token: &str) -> f64 {
        ((1.0 + self.documents as f64) / (1.0 + self.df(token) as f64)).ln() + 1.0
    }
}

/// Marks tokens that must survive: reserved markers and the attribute names
/// between each `[COL]` and its `[VAL]`.
pub fn mandatory_mask(tokens: &[&str]) -> Vec<bool> {
    let mut in_name = false;
    tokens
        .iter()
        .map(|&t| {
            if t == COL {
                in_name = true;
                true
            } else if t == VAL {
                in_name = false;
                true
            } else {
                in_name || special::is_reserved(t)
            }
        })
        .collect()
}

pub fn tfidf_summarize(
    s: &SerializedEntity,
    stats: &DocumentFrequencies,
    budget: usize,
) -> Result<SerializedEntity, SummarizeError> {
    let tokens: Vec<&str> = s.tokens().collect();
    let keep_always = mandatory_mask(&tokens);
    let mandatory = keep_always.iter().filter(|&&k| k).count();
    if budget < mandatory {
        return Err(SummarizeError::InfeasibleBudget { budget, mandatory });
    }
    if tokens.len() <= budget {
        return Ok(s.clone());
    }
    let mut values: Vec<(usize, f64)> = (0..tokens.len())
        .filter(|&i| !keep_always[i])
        .map(|i| (i, stats.idf(tokens[i])))
        .collect();
    values.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut keep = keep_always;
    for &(i, _) in values.iter().take(budget - mandatory) {
        keep[i] = true;
    }
    let out: Vec<&str> = tokens
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&t, _)| t)
        .collect();
    Ok(SerializedEntity::new(out.join(" ")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ent(s: &str) -> SerializedEntity {
        SerializedEntity::new(s)
    }

    /// Tries every subset of value positions of the right size and returns
    /// the best mass, preferring lexicographically earlier position sets.
    fn exhaustive(s: &str, stats: &DocumentFrequencies, budget: usize) -> String {
        let tokens: Vec<&str> = s.split_whitespace().collect();
        let mask = mandatory_mask(&tokens);
        let free: Vec<usize> = (0..tokens.len()).filter(|&i| !mask[i]).collect();
        let k = budget.saturating_sub(tokens.len() - free.len()).min(free.len());
        let mut best: Option<(f64, Vec<usize>)> = None;
        for bits in 0u32..(1 << free.len()) {
            if bits.count_ones() as usize != k {
                continue;
            }
            let chosen: Vec<usize> = (0..free.len()).filter(|b| bits >> b & 1 == 1).map(|b| free[b]).collect();
            let mass: f64 = chosen.iter().map(|&i| stats.idf(tokens[i])).sum();
            let better = match &best {
                None => true,
                Some((m, c)) => mass > m + 1e-12 || ((mass - m).abs() <= 1e-12 && chosen < *c),
            };
            if better {
                best = Some((mass, chosen));
            }
        }
        let chosen = best.map(|b| b.1).unwrap_or_default();
        tokens
            .iter()
            .enumerate()
            .filter(|(i, _)| mask[*i] || chosen.contains(i))
            .map(|(_, t)| *t)
            .collect::<Vec<_>>()
            .join(" ")
    }

    #[test]
    fn idf_formula() {
        let stats = DocumentFrequencies::from_corpus(&[ent("aa bb"), ent("aa")]);
        assert_eq!(stats.documents(), 2);
        assert!((stats.idf("aa") - 1.0).abs() < 1e-15);
        assert!((stats.idf("bb") - (1.5f64.ln() + 1.0)).abs() < 1e-15);
        assert!((stats.idf("zz") - (3.0f64.ln() + 1.0)).abs() < 1e-15);
        assert_eq!(stats.df("AA"), 2);
    }

    #[test]
    fn rarer_token_wins() {
        let stats = DocumentFrequencies::from_corpus(&[ent("aa bb"), ent("aa")]);
        let s = "[COL] t [VAL] aa bb aa";
        let out = tfidf_summarize(&ent(s), &stats, 4).unwrap();
        assert_eq!(out.as_str(), "[COL] t [VAL] bb");
        assert_eq!(out.as_str(), exhaustive(s, &stats, 4));
    }

    #[test]
    fn budget_not_binding() {
        let s = ent("[COL] a [VAL] one two three [COL] b [VAL] x");
        assert_eq!(s.tokens().count(), 10);
        let stats = DocumentFrequencies::new();
        assert_eq!(tfidf_summarize(&s, &stats, 10).unwrap(), s);
    }

    #[test]
    fn mandatory_boundary() {
        let stats = DocumentFrequencies::new();
        let s = ent("[COL] t [VAL] aa bb");
        assert_eq!(tfidf_summarize(&s, &stats, 3).unwrap().as_str(), "[COL] t [VAL]");
        assert_eq!(
            tfidf_summarize(&s, &stats, 2),
            Err(SummarizeError::InfeasibleBudget { budget: 2, mandatory: 3 })
        );
    }

    #[test]
    fn multiword_attribute_names_are_kept() {
        let stats = DocumentFrequencies::from_corpus(&[ent("x y z")]);
        let s = ent("[COL] product description [VAL] x y z q");
        let out = tfidf_summarize(&s, &stats, 5).unwrap();
        assert_eq!(out.as_str(), "[COL] product description [VAL] q");
    }

    #[test]
    fn plain_text_has_no_mandatory_tokens() {
        let stats = DocumentFrequencies::from_corpus(&[ent("the cat"), ent("the dog")]);
        let out = tfidf_summarize(&ent("the cat sat"), &stats, 2).unwrap();
        assert_eq!(out.as_str(), "cat sat");
    }

    fn words() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]).prop_map(String::from), 0..4)
    }

    proptest! {
        #[test]
        fn matches_exhaustive_and_is_subsequence(
            fields in prop::collection::vec(("[a-z]{1,3}", words()), 1..4),
            corpus in prop::collection::vec(words(), 0..5),
            extra in 0usize..6,
        ) {
            let s: String = fields
                .iter()
                .map(|(k, v)| format!("[COL] {k} [VAL] {}", v.join(" ")))
                .collect::<Vec<_>>()
                .join(" ");
            let docs: Vec<_> = corpus.iter().map(|w| ent(&w.join(" "))).collect();
            let stats = DocumentFrequencies::from_corpus(&docs);
            let budget = 3 * fields.len() + extra;
            let out = tfidf_summarize(&ent(&s), &stats, budget).unwrap();
            let toks: Vec<&str> = out.tokens().collect();
            prop_assert!(toks.len() <= budget);
            let mut it = s.split_whitespace();
            for t in &toks {
                prop_assert!(it.any(|x| x == *t));
            }
            let src: Vec<&str> = s.split_whitespace().collect();
            if src.len() > budget {
                prop_assert_eq!(out.as_str(), exhaustive(&s, &stats, budget));
            }
        }
    }
}
