//! Human-evaluation statistics: inter-annotator agreement, relatedness and
//! helpfulness summaries, span-count bins, the correct/valuable category
//! breakdown and quality deltas by relatedness.
//!
//! Correlations on zero-variance input are `None`, never NaN or 0.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LIKERT_MAX: u8 = 6;
/// Relatedness at or above this counts as an accurate (or valuable) explanation.
pub const ACCURATE_THRESHOLD: f64 = 4.0;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("item {item} has {found} rater(s); at least 2 are needed")]
    InsufficientRaters { item: String, found: usize },
    #[error("at least 2 items are needed, got {0}")]
    TooFewItems(usize),
    #[error("no {0}-level ratings")]
    MissingLevel(Level),
    #[error("invalid rating: {0}")]
    InvalidRating(String),
    #[error("ratings file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("reading ratings: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Explanation,
    Document,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Explanation => "explanation",
            Level::Document => "document",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Relatedness,
    HelpfulnessQ1,
    HelpfulnessQ2,
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dimension::Relatedness => "relatedness",
            Dimension::HelpfulnessQ1 => "helpfulness_q1",
            Dimension::HelpfulnessQ2 => "helpfulness_q2",
        })
    }
}

/// One Likert judgment on the 0..=6 scale.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rating {
    pub rater_id: String,
    pub sample_id: String,
    pub level: Level,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span_index: Option<u32>,
    pub dimension: Dimension,
    pub value: u8,
}

impl Rating {
    pub fn validate(&self) -> Result<(), AnalyticsError> {
        if self.value > LIKERT_MAX {
            return Err(AnalyticsError::InvalidRating(format!(
                "value {} outside 0..={LIKERT_MAX}",
                self.value
            )));
        }
        match (self.level, self.span_index) {
            (Level::Explanation, None) => Err(AnalyticsError::InvalidRating(
                "explanation-level rating needs span_index".into(),
            )),
            (Level::Explanation, Some(0)) => Err(AnalyticsError::InvalidRating("span_index is 1-based".into())),
            (Level::Document, Some(_)) => Err(AnalyticsError::InvalidRating(
                "document-level rating takes no span_index".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Reads a ratings JSONL file. Lines tagged `"kind": "postedit"` (as found
/// in review exports) are skipped.
pub fn load_ratings(path: &Path) -> Result<Vec<Rating>, AnalyticsError> {
    parse_ratings(&fs::read_to_string(path)?)
}

pub fn parse_ratings(text: &str) -> Result<Vec<Rating>, AnalyticsError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| AnalyticsError::Parse { line: i + 1, message };
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if value
            .get("kind")
            .and_then(|k| k.as_str())
            .is_some_and(|k| k != "rating")
        {
            continue;
        }
        let rating: Rating = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
        rating.validate().map_err(|e| err(e.to_string()))?;
        out.push(rating);
    }
    Ok(out)
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Mean over values in sorted order, so the result does not depend on input order.
pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    Some(sorted(values).iter().sum::<f64>() / values.len() as f64)
}

/// Sample standard deviation (n - 1 denominator).
pub fn std_dev(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values)?;
    let ss: f64 = sorted(values).iter().map(|v| (v - m) * (v - m)).sum();
    Some((ss / (values.len() - 1) as f64).sqrt())
}

/// Pearson's r; `None` for fewer than 2 pairs, mismatched lengths or zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in &pairs {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Ratings of one item (an explanation or a document), one value per rater
/// in a fixed rater order.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemRatings {
    pub item: String,
    pub values: Vec<f64>,
}

/// Groups ratings of one level and dimension by item, with raters sorted by id.
pub fn group_by_item(ratings: &[Rating], level: Level, dimension: Dimension) -> Vec<ItemRatings> {
    let mut grouped: BTreeMap<(String, Option<u32>), BTreeMap<String, u8>> = BTreeMap::new();
    for r in ratings.iter().filter(|r| r.level == level && r.dimension == dimension) {
        grouped
            .entry((r.sample_id.clone(), r.span_index))
            .or_default()
            .insert(r.rater_id.clone(), r.value);
    }
    grouped
        .into_iter()
        .map(|((sample, span), raters)| ItemRatings {
            item: match span {
                Some(i) => format!("{sample}#{i}"),
                None => sample,
            },
            values: raters.into_values().map(f64::from).collect(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementResult {
    pub pearson_r: Option<f64>,
    pub spearman_rho: Option<f64>,
    pub n_items: usize,
    pub n_repetitions: usize,
    pub seed: u64,
}

/// One-vs-rest agreement: per item a uniformly drawn rater forms series A and
/// the mean of the remaining raters forms series B. With several repetitions
/// the coefficients of the defined draws are averaged.
pub fn annotator_agreement(
    items: &[ItemRatings],
    seed: u64,
    repetitions: usize,
) -> Result<AgreementResult, AnalyticsError> {
    if items.len() < 2 {
        return Err(AnalyticsError::TooFewItems(items.len()));
    }
    if let Some(bad) = items.iter().find(|i| i.values.len() < 2) {
        return Err(AnalyticsError::InsufficientRaters {
            item: bad.item.clone(),
            found: bad.values.len(),
        });
    }
    let repetitions = repetitions.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rs = Vec::new();
    let mut rhos = Vec::new();
    for _ in 0..repetitions {
        let mut a = Vec::with_capacity(items.len());
        let mut b = Vec::with_capacity(items.len());
        for item in items {
            let pick = rng.gen_range(0..item.values.len());
            a.push(item.values[pick]);
            let rest: f64 = item
                .values
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != pick)
                .map(|(_, v)| v)
                .sum();
            b.push(rest / (item.values.len() - 1) as f64);
        }
        rs.extend(pearson(&a, &b));
        rhos.extend(spearman(&a, &b));
    }
    let avg = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(AgreementResult {
        pearson_r: avg(&rs),
        spearman_rho: avg(&rhos),
        n_items: items.len(),
        n_repetitions: repetitions,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub group: String,
    pub source: String,
    pub n: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub source: String,
    pub n_samples: usize,
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelatednessSummary {
    pub rows: Vec<SummaryRow>,
    pub correlations: Vec<CorrelationRow>,
}

fn source_of<'a>(sources: &'a HashMap<String, String>, sample: &str) -> &'a str {
    sources.get(sample).map(String::as_str).unwrap_or("unknown")
}

fn summary_row(group: String, source: String, values: &[f64]) -> SummaryRow {
    SummaryRow {
        group,
        source,
        n: values.len(),
        mean: mean(values),
        sd: std_dev(values),
    }
}

/// Explanation-level and document-level values for one sample.
type LevelValues = (Vec<f64>, Vec<f64>);

/// Mean and sd of relatedness per (level, span source), plus the Spearman
/// correlation between per-sample explanation-level and document-level means.
pub fn relatedness_summary(
    ratings: &[Rating],
    sources: &HashMap<String, String>,
) -> Result<RelatednessSummary, AnalyticsError> {
    let rel: Vec<&Rating> = ratings
        .iter()
        .filter(|r| r.dimension == Dimension::Relatedness)
        .collect();
    for level in [Level::Explanation, Level::Document] {
        if !rel.iter().any(|r| r.level == level) {
            return Err(AnalyticsError::MissingLevel(level));
        }
    }
    let mut cells: BTreeMap<(Level, String), Vec<f64>> = BTreeMap::new();
    let mut per_sample: BTreeMap<String, BTreeMap<String, LevelValues>> = BTreeMap::new();
    for r in &rel {
        let source = source_of(sources, &r.sample_id).to_string();
        cells
            .entry((r.level, source.clone()))
            .or_default()
            .push(f64::from(r.value));
        let entry = per_sample
            .entry(source)
            .or_default()
            .entry(r.sample_id.clone())
            .or_default();
        match r.level {
            Level::Explanation => entry.0.push(f64::from(r.value)),
            Level::Document => entry.1.push(f64::from(r.value)),
        }
    }
    let rows = cells
        .into_iter()
        .map(|((level, source), values)| summary_row(level.to_string(), source, &values))
        .collect();
    let correlations = per_sample
        .into_iter()
        .map(|(source, samples)| {
            let (xs, ys): (Vec<f64>, Vec<f64>) =
                samples.values().filter_map(|(e, d)| Some((mean(e)?, mean(d)?))).unzip();
            CorrelationRow {
                source,
                n_samples: xs.len(),
                spearman: spearman(&xs, &ys),
            }
        })
        .collect();
    Ok(RelatednessSummary { rows, correlations })
}

/// Mean and sd of the two helpfulness questions per span source.
pub fn helpfulness_summary(ratings: &[Rating], sources: &HashMap<String, String>) -> Vec<SummaryRow> {
    let mut cells: BTreeMap<(Dimension, String), Vec<f64>> = BTreeMap::new();
    for r in ratings.iter().filter(|r| r.dimension != Dimension::Relatedness) {
        cells
            .entry((r.dimension, source_of(sources, &r.sample_id).to_string()))
            .or_default()
            .push(f64::from(r.value));
    }
    cells
        .into_iter()
        .map(|((dim, source), values)| summary_row(dim.to_string(), source, &values))
        .collect()
}

/// Span count and span source of a rated sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleInfo {
    pub span_count: usize,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpanCountBin {
    pub source: String,
    pub bin: String,
    pub n: usize,
    pub mean: Option<f64>,
}

/// Mean relatedness (at `level`) per exact span count; counts of `cap` or
/// more share the bin `"{cap}+"`.
pub fn relatedness_by_span_count(
    ratings: &[Rating],
    info: &HashMap<String, SampleInfo>,
    level: Level,
    cap: usize,
) -> Vec<SpanCountBin> {
    let cap = cap.max(1);
    let mut bins: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for r in ratings
        .iter()
        .filter(|r| r.dimension == Dimension::Relatedness && r.level == level)
    {
        let Some(sample) = info.get(&r.sample_id) else { continue };
        bins.entry((sample.source.clone(), sample.span_count.min(cap)))
            .or_default()
            .push(f64::from(r.value));
    }
    bins.into_iter()
        .map(|((source, count), values)| SpanCountBin {
            source,
            bin: if count == cap {
                format!("{cap}+")
            } else {
                count.to_string()
            },
            n: values.len(),
            mean: mean(&values),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    CorrectSpanAccurate,
    CorrectSpanInaccurate,
    IncorrectSpanValuable,
    IncorrectSpanWorthless,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::CorrectSpanAccurate,
        Category::CorrectSpanInaccurate,
        Category::IncorrectSpanValuable,
        Category::IncorrectSpanWorthless,
    ];

    pub fn classify(span_correct: bool, relatedness: f64) -> Self {
        match (span_correct, relatedness >= ACCURATE_THRESHOLD) {
            (true, true) => Category::CorrectSpanAccurate,
            (true, false) => Category::CorrectSpanInaccurate,
            (false, true) => Category::IncorrectSpanValuable,
            (false, false) => Category::IncorrectSpanWorthless,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::CorrectSpanAccurate => "correct_span_accurate",
            Category::CorrectSpanInaccurate => "correct_span_inaccurate",
            Category::IncorrectSpanValuable => "incorrect_span_valuable",
            Category::IncorrectSpanWorthless => "incorrect_span_worthless",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryRow {
    pub category: Category,
    pub count: usize,
    pub prevalence: f64,
    pub mean_relatedness: Option<f64>,
}

pub fn category_breakdown(items: &[(bool, f64)]) -> Vec<CategoryRow> {
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &(correct, rel) in items {
        let cat = Category::classify(correct, rel);
        let idx = Category::ALL.iter().position(|c| *c == cat).unwrap_or_default();
        groups.entry(idx).or_default().push(rel);
    }
    Category::ALL
        .iter()
        .enumerate()
        .map(|(idx, cat)| {
            let values = groups.get(&idx).map(Vec::as_slice).unwrap_or(&[]);
            CategoryRow {
                category: *cat,
                count: values.len(),
                prevalence: if items.is_empty() {
                    0.0
                } else {
                    values.len() as f64 / items.len() as f64
                },
                mean_relatedness: mean(values),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaBin {
    /// Integer bin `floor(relatedness)`, clamped to 0..=6.
    pub bin: u8,
    pub n: usize,
    pub mean_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaSummary {
    pub bins: Vec<DeltaBin>,
    pub pearson_relatedness_original: Option<f64>,
}

/// Mean `score_corrected - score_original` per relatedness bin, and the Pearson
/// correlation between relatedness and the original score.
pub fn delta_by_relatedness(items: &[(f64, f64, f64)]) -> DeltaSummary {
    let mut bins: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for &(rel, orig, corr) in items {
        let bin = rel.clamp(0.0, f64::from(LIKERT_MAX)).floor() as u8;
        bins.entry(bin).or_default().push(corr - orig);
    }
    let rel: Vec<f64> = items.iter().map(|i| i.0).collect();
    let orig: Vec<f64> = items.iter().map(|i| i.1).collect();
    DeltaSummary {
        bins: bins
            .into_iter()
            .map(|(bin, deltas)| DeltaBin {
                bin,
                n: deltas.len(),
                mean_delta: mean(&deltas).unwrap_or(0.0),
            })
            .collect(),
        pearson_relatedness_original: pearson(&rel, &orig),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rating(rater: &str, sample: &str, level: Level, span: Option<u32>, value: u8) -> Rating {
        Rating {
            rater_id: rater.into(),
            sample_id: sample.into(),
            level,
            span_index: span,
            dimension: Dimension::Relatedness,
            value,
        }
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn perfect_agreement_is_exactly_one() {
        let items: Vec<ItemRatings> = [1.0, 4.0, 6.0, 2.0, 5.0]
            .iter()
            .enumerate()
            .map(|(i, v)| ItemRatings {
                item: i.to_string(),
                values: vec![*v; 3],
            })
            .collect();
        let res = annotator_agreement(&items, 7, 1).unwrap();
        assert_eq!(res.pearson_r, Some(1.0));
        assert_eq!(res.spearman_rho, Some(1.0));
        let res = annotator_agreement(&items, 7, 10).unwrap();
        assert_eq!(res.pearson_r, Some(1.0));
    }

    #[test]
    fn reversed_ranks_give_minus_one() {
        let items: Vec<ItemRatings> = (0..5)
            .map(|i| ItemRatings {
                item: i.to_string(),
                values: vec![i as f64, (4 - i) as f64],
            })
            .collect();
        let res = annotator_agreement(&items, 3, 1).unwrap();
        assert_eq!(res.spearman_rho, Some(-1.0));
    }

    #[test]
    fn agreement_errors_and_degenerate_series() {
        let one_rater = vec![
            ItemRatings {
                item: "a".into(),
                values: vec![1.0, 2.0],
            },
            ItemRatings {
                item: "b".into(),
                values: vec![3.0],
            },
        ];
        assert!(matches!(
            annotator_agreement(&one_rater, 0, 1),
            Err(AnalyticsError::InsufficientRaters { .. })
        ));
        let constant: Vec<ItemRatings> = (0..4)
            .map(|i| ItemRatings {
                item: i.to_string(),
                values: vec![3.0, 3.0],
            })
            .collect();
        let res = annotator_agreement(&constant, 0, 1).unwrap();
        assert_eq!(res.pearson_r, None);
        assert_eq!(res.spearman_rho, None);
    }

    #[test]
    fn grouping_orders_raters_by_id() {
        let ratings = vec![
            rating("r2", "s1", Level::Explanation, Some(1), 2),
            rating("r1", "s1", Level::Explanation, Some(1), 5),
            rating("r1", "s1", Level::Document, None, 4),
        ];
        let groups = group_by_item(&ratings, Level::Explanation, Dimension::Relatedness);
        assert_eq!(
            groups,
            vec![ItemRatings {
                item: "s1#1".into(),
                values: vec![5.0, 2.0]
            }]
        );
    }

    #[test]
    fn rating_validation() {
        assert!(rating("r", "s", Level::Explanation, Some(1), 7).validate().is_err());
        assert!(rating("r", "s", Level::Explanation, None, 3).validate().is_err());
        assert!(rating("r", "s", Level::Document, Some(1), 3).validate().is_err());
        assert!(rating("r", "s", Level::Document, None, 0).validate().is_ok());
    }

    #[test]
    fn parse_skips_postedits() {
        let text = "{\"kind\":\"rating\",\"rater_id\":\"r\",\"sample_id\":\"s\",\"level\":\"document\",\"dimension\":\"relatedness\",\"value\":4}\n{\"kind\":\"postedit\",\"rater_id\":\"r\",\"sample_id\":\"s\",\"text\":\"x\"}\n";
        let ratings = parse_ratings(text).unwrap();
        assert_eq!(ratings.len(), 1);
        assert!(parse_ratings(
            "{\"rater_id\":\"r\",\"sample_id\":\"s\",\"level\":\"document\",\"dimension\":\"relatedness\",\"value\":9}"
        )
        .is_err());
    }

    #[test]
    fn document_equal_to_explanation_mean_correlates_perfectly() {
        let mut ratings = Vec::new();
        for (i, vals) in [[2u8, 4], [6, 6], [1, 3], [5, 3]].iter().enumerate() {
            let s = format!("s{i}");
            ratings.push(rating("r", &s, Level::Explanation, Some(1), vals[0]));
            ratings.push(rating("r", &s, Level::Explanation, Some(2), vals[1]));
            ratings.push(rating("r", &s, Level::Document, None, (vals[0] + vals[1]) / 2));
        }
        let summary = relatedness_summary(&ratings, &HashMap::new()).unwrap();
        assert_eq!(summary.correlations.len(), 1);
        assert_eq!(summary.correlations[0].spearman, Some(1.0));
        assert_eq!(summary.rows.len(), 2);
    }

    #[test]
    fn constant_ratings_have_undefined_correlation() {
        let ratings: Vec<Rating> = (0..3)
            .flat_map(|i| {
                let s = format!("s{i}");
                [
                    rating("r", &s, Level::Explanation, Some(1), 4),
                    rating("r", &s, Level::Document, None, 4),
                ]
            })
            .collect();
        let summary = relatedness_summary(&ratings, &HashMap::new()).unwrap();
        assert_eq!(summary.correlations[0].spearman, None);
        let only_doc: Vec<Rating> = ratings.into_iter().filter(|r| r.level == Level::Document).collect();
        assert!(matches!(
            relatedness_summary(&only_doc, &HashMap::new()),
            Err(AnalyticsError::MissingLevel(Level::Explanation))
        ));
    }

    #[test]
    fn span_count_bins() {
        let info: HashMap<String, SampleInfo> = [("a", 1usize), ("b", 2), ("c", 7)]
            .iter()
            .map(|(id, n)| {
                (
                    id.to_string(),
                    SampleInfo {
                        span_count: *n,
                        source: "human".into(),
                    },
                )
            })
            .collect();
        let ratings = vec![
            rating("r1", "a", Level::Document, None, 5),
            rating("r2", "a", Level::Document, None, 5),
            rating("r1", "b", Level::Document, None, 3),
            rating("r1", "c", Level::Document, None, 2),
        ];
        let bins = relatedness_by_span_count(&ratings, &info, Level::Document, 5);
        let got: Vec<(String, Option<f64>)> = bins.iter().map(|b| (b.bin.clone(), b.mean)).collect();
        assert_eq!(
            got,
            vec![
                ("1".into(), Some(5.0)),
                ("2".into(), Some(3.0)),
                ("5+".into(), Some(2.0))
            ]
        );
    }

    #[test]
    fn category_boundary_is_inclusive() {
        let rows = category_breakdown(&[(true, 4.0), (false, 4.0), (true, 3.99), (false, 0.0)]);
        assert!(rows.iter().all(|r| r.count == 1));
        let rows = category_breakdown(&[(true, 5.0), (true, 5.0)]);
        assert_eq!(rows[0].prevalence, 1.0);
        assert_eq!(rows.iter().map(|r| r.prevalence).sum::<f64>(), 1.0);
    }

    #[test]
    fn delta_bins_and_sign() {
        let flat = delta_by_relatedness(&[(1.0, 0.5, 0.5), (5.0, 0.2, 0.2), (5.5, 0.9, 0.9)]);
        assert!(flat.bins.iter().all(|b| b.mean_delta == 0.0));
        assert!(flat.pearson_relatedness_original.is_some());
        let anti = delta_by_relatedness(&[(0.0, 0.9, 1.0), (2.0, 0.7, 0.8), (4.0, 0.5, 0.7), (6.0, 0.2, 0.6)]);
        assert!(anti.pearson_relatedness_original.unwrap() < 0.0);
        assert_eq!(anti.bins.len(), 4);
    }

    #[test]
    fn aggregations_ignore_input_order() {
        let xs = [0.1, 0.7, 0.3, 0.9, 0.2];
        let ys = [0.3, 0.1, 0.8, 0.4, 0.5];
        let mut rx = xs;
        let mut ry = ys;
        rx.reverse();
        ry.reverse();
        assert_eq!(pearson(&xs, &ys), pearson(&rx, &ry));
        assert_eq!(mean(&xs), mean(&rx));
    }
}
