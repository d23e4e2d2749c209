//! Parsing of model completions into per-span explanations and a correction.
//!
//! Expected shape:
//!
//! ```text
//! Explanation for error1: ...
//! Explanation for error2: ...
//! Translation correction: ...
//! ```
//!
//! Parsing is lenient: irregularities become [`Diagnostic`]s and never abort,
//! unless strict mode asks for a correction to be present.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

static EXPLANATION_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)^\s*(?:[-+>]\s*|\d+[.)]\s+|#{1,6}\s*)?(?:\*\*|__|\*|_)?\s*explanation\s+for\s+error\s*(\d+)\s*(?:\*\*|__|\*|_)?\s*:\s*(?:\*\*|__|\*|_)?\s*(.*)$",
    )
    .expect("explanation pattern")
});

static CORRECTION_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)^\s*(?:[-+>]\s*|#{1,6}\s*)?(?:\*\*|__|\*|_)?\s*translation\s+correction\s*(?:\*\*|__|\*|_)?\s*:\s*(?:\*\*|__|\*|_)?\s*(.*)$",
    )
    .expect("correction pattern")
});

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OutputError {
    #[error("completion has no translation correction")]
    NoCorrection,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Diagnostic {
    MissingExplanation(u32),
    SurplusExplanation(u32),
    DuplicateExplanation(u32),
    InvalidIndex(String),
    MissingCorrection,
    MultipleCorrections,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::MissingExplanation(n) => write!(f, "missing explanation {n}"),
            Diagnostic::SurplusExplanation(n) => write!(f, "surplus explanation {n}"),
            Diagnostic::DuplicateExplanation(n) => write!(f, "duplicate explanation {n}"),
            Diagnostic::InvalidIndex(raw) => write!(f, "invalid explanation index {raw}"),
            Diagnostic::MissingCorrection => f.write_str("missing correction"),
            Diagnostic::MultipleCorrections => f.write_str("multiple corrections"),
        }
    }
}

impl FromStr for Diagnostic {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let indexed = |prefix: &str| s.strip_prefix(prefix).and_then(|n| n.parse::<u32>().ok());
        if let Some(n) = indexed("missing explanation ") {
            return Ok(Diagnostic::MissingExplanation(n));
        }
        if let Some(n) = indexed("surplus explanation ") {
            return Ok(Diagnostic::SurplusExplanation(n));
        }
        if let Some(n) = indexed("duplicate explanation ") {
            return Ok(Diagnostic::DuplicateExplanation(n));
        }
        if let Some(raw) = s.strip_prefix("invalid explanation index ") {
            return Ok(Diagnostic::InvalidIndex(raw.to_string()));
        }
        match s {
            "missing correction" => Ok(Diagnostic::MissingCorrection),
            "multiple corrections" => Ok(Diagnostic::MultipleCorrections),
            other => Err(format!("unknown diagnostic {other:?}")),
        }
    }
}

impl Serialize for Diagnostic {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Diagnostic {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub explanations: BTreeMap<u32, String>,
    pub correction: Option<String>,
    pub raw: String,
    pub diagnostics: Vec<Diagnostic>,
}

/// Single left-to-right pass decoding `&lt;`, `&gt;` and `&amp;`.
pub fn unescape_entities(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find('&') {
        out.push_str(&rest[..pos]);
        rest = &rest[pos..];
        let entity = [("&lt;", '<'), ("&gt;", '>'), ("&amp;", '&')]
            .into_iter()
            .find(|(e, _)| rest.starts_with(e));
        match entity {
            Some((e, ch)) => {
                out.push(ch);
                rest = &rest[e.len()..];
            }
            None => {
                out.push('&');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

enum Section {
    Preamble,
    Explanation(u32),
    Correction,
    AwaitingCorrection,
    Ignored,
}

fn finish(buf: &mut Vec<&str>) -> String {
    let text = buf.join("\n").trim().to_string();
    buf.clear();
    text
}

/// Lenient parse; never fails.
pub fn parse_output_lenient(raw: &str, expected_spans: usize) -> ExplanationReport {
    let mut explanations: BTreeMap<u32, String> = BTreeMap::new();
    let mut diagnostics = Vec::new();
    let mut corrections: Vec<String> = Vec::new();
    let mut section = Section::Preamble;
    let mut buf: Vec<&str> = Vec::new();

    let flush = |section: &Section, buf: &mut Vec<&str>, explanations: &mut BTreeMap<u32, String>| {
        if let Section::Explanation(n) = section {
            explanations.insert(*n, finish(buf));
        }
        buf.clear();
    };

    for line in raw.lines() {
        if let Some(caps) = EXPLANATION_RE.captures(line) {
            flush(&section, &mut buf, &mut explanations);
            let digits = &caps[1];
            match digits.parse::<u32>() {
                Ok(n) if n > 0 => {
                    if explanations.contains_key(&n) {
                        diagnostics.push(Diagnostic::DuplicateExplanation(n));
                    }
                    section = Section::Explanation(n);
                    buf.push(caps.get(2).map_or("", |m| m.as_str()));
                }
                _ => {
                    diagnostics.push(Diagnostic::InvalidIndex(digits.to_string()));
                    section = Section::Ignored;
                }
            }
        } else if let Some(caps) = CORRECTION_RE.captures(line) {
            flush(&section, &mut buf, &mut explanations);
            let rest = caps.get(1).map_or("", |m| m.as_str()).trim();
            if rest.is_empty() {
                section = Section::AwaitingCorrection;
            } else {
                corrections.push(rest.to_string());
                section = Section::Correction;
            }
        } else {
            match section {
                Section::Explanation(_) => buf.push(line),
                Section::AwaitingCorrection if !line.trim().is_empty() => {
                    corrections.push(line.trim().to_string());
                    section = Section::Correction;
                }
                _ => {}
            }
        }
    }
    flush(&section, &mut buf, &mut explanations);

    if corrections.len() > 1 {
        diagnostics.push(Diagnostic::MultipleCorrections);
    }
    let expected: BTreeSet<u32> = (1..=expected_spans as u32).collect();
    for n in expected.iter().filter(|n| !explanations.contains_key(n)) {
        diagnostics.push(Diagnostic::MissingExplanation(*n));
    }
    for n in explanations.keys().filter(|n| !expected.contains(n)) {
        diagnostics.push(Diagnostic::SurplusExplanation(*n));
    }
    let correction = corrections.pop().map(|c| unescape_entities(&c));
    if correction.is_none() {
        diagnostics.push(Diagnostic::MissingCorrection);
    }
    ExplanationReport {
        explanations,
        correction,
        raw: raw.to_string(),
        diagnostics,
    }
}

/// Parses `raw`; in strict mode a missing correction is an error.
pub fn parse_output(raw: &str, expected_spans: usize, strict: bool) -> Result<ExplanationReport, OutputError> {
    let report = parse_output_lenient(raw, expected_spans);
    if strict && report.correction.is_none() {
        return Err(OutputError::NoCorrection);
    }
    Ok(report)
}
