//! Lexical metrics: character Levenshtein similarity, chrF, exact-match rate
//! and pairwise win rate.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::nfc;
use crate::scorer::{Scorer, ScorerError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{left} corrections but {right} references")]
    LengthMismatch { left: usize, right: usize },
    #[error("no items to evaluate")]
    Empty,
    #[error("scorer: {0}")]
    Scorer(#[from] ScorerError),
}

/// Edit distance over Unicode scalar values with unit costs.
pub fn levenshtein_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let above = row[j + 1];
            let cost = usize::from(ca != cb);
            row[j + 1] = (diag + cost).min(above + 1).min(row[j] + 1);
            diag = above;
        }
    }
    row[b.len()]
}

/// `1 - dist(a, b) / max(|a|, |b|)`; two empty strings are identical.
pub fn levenshtein_similarity(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein_distance(a, b) as f64 / longest as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChrfParams {
    pub max_n: usize,
    pub beta: f64,
}

impl Default for ChrfParams {
    fn default() -> Self {
        Self { max_n: 6, beta: 2.0 }
    }
}

fn char_ngrams(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut counts = HashMap::new();
    if chars.len() >= n {
        for gram in chars.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Character n-gram F-score in `[0, 100]`.
///
/// Whitespace is removed before extraction. Precision and recall are averaged
/// over the orders for which both sides have at least one n-gram, then
/// combined with recall weighted by `beta`.
pub fn chrf(hyp: &str, reference: &str, params: &ChrfParams) -> f64 {
    let hyp: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
    let reference: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    let mut precision = 0.0;
    let mut recall = 0.0;
    let mut orders = 0usize;
    for n in 1..=params.max_n.max(1) {
        let h = char_ngrams(&hyp, n);
        let r = char_ngrams(&reference, n);
        let h_total: usize = h.values().sum();
        let r_total: usize = r.values().sum();
        if h_total == 0 || r_total == 0 {
            continue;
        }
        let matched: usize = h.iter().map(|(g, c)| (*c).min(*r.get(g).unwrap_or(&0))).sum();
        precision += matched as f64 / h_total as f64;
        recall += matched as f64 / r_total as f64;
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    precision /= orders as f64;
    recall /= orders as f64;
    let b2 = params.beta * params.beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        return 0.0;
    }
    100.0 * (1.0 + b2) * precision * recall / denom
}

/// Share of corrections identical to their reference after NFC and trimming.
pub fn exact_match_rate(corrections: &[String], references: &[String]) -> Result<f64, MetricError> {
    if corrections.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            left: corrections.len(),
            right: references.len(),
        });
    }
    if corrections.is_empty() {
        return Err(MetricError::Empty);
    }
    let same = corrections
        .iter()
        .zip(references)
        .filter(|(c, r)| nfc(c.trim()) == nfc(r.trim()))
        .count();
    Ok(same as f64 / corrections.len() as f64)
}

/// One `(source, correction, reference)` triple for [`pairwise_win_rate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WinItem {
    pub source: String,
    pub correction: String,
    pub reference: String,
}

/// Share of items where the correction strictly outscores the reference
/// under a referenceless scorer. Ties count as losses.
pub fn pairwise_win_rate(scorer: &dyn Scorer, items: &[WinItem]) -> Result<f64, MetricError> {
    if items.is_empty() {
        return Err(MetricError::Empty);
    }
    if scorer.requires_reference() {
        return Err(ScorerError::NeedsReference(scorer.id().to_string()).into());
    }
    let mut wins = 0usize;
    for item in items {
        let corr = scorer.score(&item.source, &item.correction, None)?;
        let reference = scorer.score(&item.source, &item.reference, None)?;
        if corr.value > reference.value {
            wins += 1;
        }
    }
    Ok(wins as f64 / items.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Score;

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein_similarity("abc", "abc"), 1.0);
        assert_eq!(levenshtein_similarity("", "ab"), 0.0);
        assert_eq!(levenshtein_similarity("", ""), 1.0);
        assert_eq!(levenshtein_distance("kitten", "sitting"), 3);
        assert!((levenshtein_similarity("kitten", "sitting") - (1.0 - 3.0 / 7.0)).abs() < 1e-15);
        assert_eq!(levenshtein_distance("汉字", "汉"), 1);
    }

    #[test]
    fn chrf_examples() {
        let p = ChrfParams::default();
        assert_eq!(chrf("Alle trugen", "Alle trugen", &p), 100.0);
        assert_eq!(chrf("x", "x", &p), 100.0);
        assert_eq!(chrf("aaaa", "bbbb", &p), 0.0);
        assert_eq!(chrf("abc", "", &p), 0.0);
        assert_eq!(chrf("  ab c ", "abc", &p), chrf("abc", "abc", &p));
    }

    #[test]
    fn chrf_two_orders_by_hand() {
        // "abcd" vs "abce", n = 1: 3 of 4 unigrams match; n = 2: 2 of 3 bigrams.
        // P = R = (3/4 + 2/3) / 2 = 17/24, so F = 17/24 for any beta.
        let v = chrf("abcd", "abce", &ChrfParams { max_n: 2, beta: 2.0 });
        assert!((v - 100.0 * 17.0 / 24.0).abs() < 1e-9);
    }

    #[test]
    fn exact_match() {
        let c = vec!["a ".to_string(), "b".to_string()];
        assert_eq!(exact_match_rate(&c, &["a".to_string(), "b".to_string()]).unwrap(), 1.0);
        assert_eq!(exact_match_rate(&c, &["x".to_string(), "y".to_string()]).unwrap(), 0.0);
        assert!(matches!(
            exact_match_rate(&c, &["a".to_string()]),
            Err(MetricError::LengthMismatch { .. })
        ));
        // NFC: precomposed vs combining acute.
        assert_eq!(
            exact_match_rate(&["é".to_string()], &["e\u{301}".to_string()]).unwrap(),
            1.0
        );
    }

    struct LengthScorer;

    impl Scorer for LengthScorer {
        fn id(&self) -> &str {
            "length"
        }
        fn requires_reference(&self) -> bool {
            false
        }
        fn score(&self, _src: &str, hyp: &str, _reference: Option<&str>) -> Result<Score, ScorerError> {
            Ok(Score::new(hyp.chars().count() as f64, "length"))
        }
    }

    fn item(corr: &str, reference: &str) -> WinItem {
        WinItem {
            source: "s".into(),
            correction: corr.into(),
            reference: reference.into(),
        }
    }

    #[test]
    fn win_rate_by_hand() {
        let same = [item("abc", "abc"), item("x", "x")];
        assert_eq!(pairwise_win_rate(&LengthScorer, &same).unwrap(), 0.0);
        // Wins: items 1 and 4 (longer correction); item 3 ties; items 2 and 5 lose.
        let items = [
            item("abcd", "abc"),
            item("a", "abc"),
            item("ab", "cd"),
            item("abcdef", "a"),
            item("", "z"),
        ];
        assert_eq!(pairwise_win_rate(&LengthScorer, &items).unwrap(), 2.0 / 5.0);
    }
}
