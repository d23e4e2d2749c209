//! Domain types shared by every stage: language pairs, error spans, samples
//! and quality labels.
//!
//! All character offsets count Unicode scalar values over NFC-normalized text.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid language pair {0:?}: expected `src-tgt` with lowercase ASCII codes")]
    InvalidLanguagePair(String),
    #[error("unknown severity {0:?}")]
    UnknownSeverity(String),
    #[error("unknown quality bucket {0:?}")]
    UnknownBucket(String),
    #[error("span [{start}, {end}) is out of bounds for a translation of {len} characters")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },
    #[error("empty span at {0}")]
    EmptySpan(usize),
}

/// A source/target language pair, rendered as `src-tgt`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LanguagePair {
    src: String,
    tgt: String,
}

fn valid_code(code: &str) -> bool {
    !code.is_empty() && code.bytes().all(|b| b.is_ascii_lowercase())
}

impl LanguagePair {
    pub fn new(src: &str, tgt: &str) -> Result<Self, ModelError> {
        if !valid_code(src) || !valid_code(tgt) {
            return Err(ModelError::InvalidLanguagePair(format!("{src}-{tgt}")));
        }
        Ok(Self {
            src: src.to_string(),
            tgt: tgt.to_string(),
        })
    }

    pub fn src(&self) -> &str {
        &self.src
    }

    pub fn tgt(&self) -> &str {
        &self.tgt
    }
}

impl fmt::Display for LanguagePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.src, self.tgt)
    }
}

impl FromStr for LanguagePair {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('-') {
            Some((src, tgt)) => Self::new(src, tgt).map_err(|_| ModelError::InvalidLanguagePair(s.to_string())),
            None => Err(ModelError::InvalidLanguagePair(s.to_string())),
        }
    }
}

impl Serialize for LanguagePair {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LanguagePair {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// MQM severity of an error span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Minor,
    Major,
    Critical,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Minor => "minor",
            Severity::Major => "major",
            Severity::Critical => "critical",
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Severity {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "minor" => Ok(Severity::Minor),
            "major" => Ok(Severity::Major),
            "critical" => Ok(Severity::Critical),
            other => Err(ModelError::UnknownSeverity(other.to_string())),
        }
    }
}

/// A located, severity-tagged substring of a translation.
///
/// `start`/`end` are a half-open range of character (Unicode scalar) offsets
/// and `text` caches the covered characters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ErrorSpan {
    pub start: usize,
    pub end: usize,
    pub severity: Severity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub text: String,
}

impl ErrorSpan {
    /// Builds a span over `translation`, filling in `text` from the offsets.
    pub fn over(translation: &str, start: usize, end: usize, severity: Severity) -> Result<Self, ModelError> {
        if start >= end {
            return Err(ModelError::EmptySpan(start));
        }
        let text = char_slice(translation, start, end).ok_or(ModelError::SpanOutOfBounds {
            start,
            end,
            len: char_len(translation),
        })?;
        Ok(Self {
            start,
            end,
            severity,
            category: None,
            text: text.to_string(),
        })
    }

    pub fn with_category(mut self, category: impl Into<String>) -> Self {
        self.category = Some(category.into());
        self
    }

    pub fn char_len(&self) -> usize {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityBucket {
    Weak,
    Moderate,
    Good,
    Excellent,
    Best,
}

impl QualityBucket {
    pub const ALL: [QualityBucket; 5] = [
        QualityBucket::Weak,
        QualityBucket::Moderate,
        QualityBucket::Good,
        QualityBucket::Excellent,
        QualityBucket::Best,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QualityBucket::Weak => "weak",
            QualityBucket::Moderate => "moderate",
            QualityBucket::Good => "good",
            QualityBucket::Excellent => "excellent",
            QualityBucket::Best => "best",
        }
    }
}

impl fmt::Display for QualityBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QualityBucket {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        QualityBucket::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| ModelError::UnknownBucket(s.to_string()))
    }
}

/// A raw quality value in `[0, 1]` together with its bucket label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityAssessment {
    pub raw: f64,
    pub bucket: QualityBucket,
}

/// A metric value in `[0, 1]`. Tables display `value * 100`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub metric_id: String,
}

impl Score {
    pub fn new(value: f64, metric_id: impl Into<String>) -> Self {
        Self {
            value,
            metric_id: metric_id.into(),
        }
    }

    pub fn display_value(&self) -> f64 {
        self.value * 100.0
    }
}

/// One evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub lp: LanguagePair,
    pub source: String,
    pub translation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default)]
    pub spans: Vec<ErrorSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_quality: Option<QualityAssessment>,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        lp: LanguagePair,
        source: impl Into<String>,
        translation: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            lp,
            source: source.into(),
            translation: translation.into(),
            reference: None,
            spans: Vec::new(),
            system: None,
            gold_quality: None,
        }
    }
}

pub fn nfc(text: &str) -> String {
    text.nfc().collect()
}

pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Returns the substring covering characters `[start, end)`, or `None` when
/// the range is inverted or runs past the end of `text`.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut indices = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let from = indices.nth(start)?;
    let to = if end == start {
        from
    } else {
        indices.nth(end - start - 1)?
    };
    Some(&text[from..to])
}

/// Checks every span invariant of `spans` against `translation`.
///
/// Violations are reported as human-readable strings naming the span index and
/// the broken rule; an empty list means the spans are valid.
pub fn validate_spans(translation: &str, spans: &[ErrorSpan]) -> Vec<String> {
    let len = char_len(translation);
    let mut violations = Vec::new();
    for (i, span) in spans.iter().enumerate() {
        if span.start >= span.end {
            violations.push(format!("span {i}: empty span"));
            continue;
        }
        if span.end > len {
            violations.push(format!("span {i}: end {} exceeds translation length {len}", span.end));
            continue;
        }
        if char_slice(translation, span.start, span.end) != Some(span.text.as_str()) {
            violations.push(format!(
                "span {i}: text does not match translation[{}..{})",
                span.start, span.end
            ));
        }
    }
    for (i, pair) in spans.windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        if b.start < a.start {
            violations.push(format!("spans {},{} out of order", i, i + 1));
        } else if b.start < a.end {
            violations.push(format!("spans {},{} overlap", i, i + 1));
        }
    }
    violations
}

/// Reports every broken invariant of a sample. Never fails.
pub fn validate_sample(sample: &Sample) -> Vec<String> {
    let mut violations = Vec::new();
    if sample.id.is_empty() {
        violations.push("id: must not be empty".to_string());
    }
    if let Some(q) = &sample.gold_quality {
        if !(0.0..=1.0).contains(&q.raw) {
            violations.push(format!("gold_quality: raw {} outside [0, 1]", q.raw));
        }
    }
    violations.extend(validate_spans(&sample.translation, &sample.spans));
    violations
}

/// Sorts spans and merges any that overlap or nest into their union. The
/// merged span keeps the highest severity and drops categories that disagree.
pub fn merge_overlapping(translation: &str, spans: &[ErrorSpan]) -> Vec<ErrorSpan> {
    let mut sorted: Vec<ErrorSpan> = spans.to_vec();
    sorted.sort_by_key(|s| (s.start, s.end));
    let mut merged: Vec<ErrorSpan> = Vec::with_capacity(sorted.len());
    for span in sorted {
        match merged.last_mut() {
            Some(last) if span.start < last.end => {
                last.end = last.end.max(span.end);
                last.severity = last.severity.max(span.severity);
                if last.category != span.category {
                    last.category = None;
                }
            }
            _ => merged.push(span),
        }
    }
    for span in &mut merged {
        if let Some(text) = char_slice(translation, span.start, span.end) {
            span.text = text.to_string();
        }
    }
    merged
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_with(translation: &str, spans: Vec<ErrorSpan>) -> Sample {
        let mut s = Sample::new("s1", "en-de".parse().unwrap(), "src", translation);
        s.spans = spans;
        s
    }

    #[test]
    fn language_pair_round_trips() {
        let lp: LanguagePair = "en-de".parse().unwrap();
        assert_eq!(lp.to_string(), "en-de");
        assert_eq!(lp.src(), "en");
        assert!("EN-de".parse::<LanguagePair>().is_err());
        assert!("en".parse::<LanguagePair>().is_err());
        assert!("-de".parse::<LanguagePair>().is_err());
    }

    #[test]
    fn valid_sample_has_no_violations() {
        let translation = "0123456789abcdefghijklmnopqrstuvwxyzABCD";
        assert_eq!(char_len(translation), 40);
        let span = ErrorSpan::over(translation, 12, 27, Severity::Major).unwrap();
        assert_eq!(
            validate_sample(&sample_with(translation, vec![span])),
            Vec::<String>::new()
        );
    }

    #[test]
    fn empty_span_is_reported() {
        let span = ErrorSpan {
            start: 3,
            end: 3,
            severity: Severity::Minor,
            category: None,
            text: String::new(),
        };
        assert_eq!(
            validate_sample(&sample_with("abcdef", vec![span])),
            vec!["span 0: empty span".to_string()]
        );
    }

    #[test]
    fn overlapping_spans_are_reported() {
        let t = "abcdefghijkl";
        let a = ErrorSpan::over(t, 3, 8, Severity::Minor).unwrap();
        let b = ErrorSpan::over(t, 5, 10, Severity::Minor).unwrap();
        assert_eq!(
            validate_sample(&sample_with(t, vec![a, b])),
            vec!["spans 0,1 overlap".to_string()]
        );
    }

    #[test]
    fn char_slice_uses_scalar_offsets() {
        let t = "汉字ab שלום";
        assert_eq!(char_slice(t, 0, 2), Some("汉字"));
        assert_eq!(char_slice(t, 5, 9), Some("שלום"));
        assert_eq!(char_slice(t, 9, 9), Some(""));
        assert_eq!(char_slice(t, 5, 10), None);
    }

    #[test]
    fn validation_is_idempotent() {
        let t = "abcdefghijkl";
        let a = ErrorSpan::over(t, 3, 8, Severity::Minor).unwrap();
        let b = ErrorSpan::over(t, 5, 10, Severity::Minor).unwrap();
        let s = sample_with(t, vec![a, b]);
        let before = s.clone();
        assert_eq!(validate_sample(&s), validate_sample(&s));
        assert_eq!(s, before);
    }

    #[test]
    fn merge_unions_overlaps() {
        let t = "abcdefghijkl";
        let a = ErrorSpan::over(t, 3, 8, Severity::Minor).unwrap();
        let b = ErrorSpan::over(t, 5, 10, Severity::Major).unwrap();
        let c = ErrorSpan::over(t, 10, 11, Severity::Minor).unwrap();
        let merged = merge_overlapping(t, &[b, a, c]);
        assert_eq!(merged.len(), 2);
        assert_eq!((merged[0].start, merged[0].end), (3, 10));
        assert_eq!(merged[0].text, "defghij");
        assert_eq!(merged[0].severity, Severity::Major);
        assert!(validate_spans(t, &merged).is_empty());
    }
}
