//! Pipeline run records and the fix-rate evaluation over them.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ErrorSpan, QualityAssessment, Score};
use crate::parser::ExplanationReport;
use crate::prompting::Prompt;

/// Where error spans come from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DetectorRef {
    /// Spans stored with the samples (human MQM annotations).
    HumanFile { path: String },
    /// An external QE service returning spans and a score.
    QeService { endpoint: String, use_reference: bool },
}

impl DetectorRef {
    pub fn summary(&self) -> String {
        match self {
            DetectorRef::HumanFile { path } => format!("human_file:{path}"),
            DetectorRef::QeService {
                endpoint,
                use_reference,
            } => {
                format!("qe_service:{endpoint}{}", if *use_reference { "+ref" } else { "" })
            }
        }
    }

    /// Short tag used to group results by span source.
    pub fn source_tag(&self) -> &'static str {
        match self {
            DetectorRef::HumanFile { .. } => "human",
            DetectorRef::QeService { .. } => "qe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub spans: Vec<ErrorSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<Score>,
    pub provenance: String,
    pub source_tag: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Detect,
    Score,
    Prompt,
    Complete,
    Parse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: Stage,
    pub message: String,
    /// True when the failure came from a remote backend rather than the input.
    pub backend: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Timings {
    pub detect: Duration,
    pub complete: Duration,
    pub total: Duration,
}

/// Outcome of explaining one sample. Exactly one of `report` and `failure`
/// is present. Timings are not serialized so exported runs stay byte-stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub sample_id: String,
    pub translation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<QualityAssessment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<Prompt>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ExplanationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
    #[serde(skip)]
    pub timings: Timings,
}

impl PipelineRun {
    pub fn spans(&self) -> &[ErrorSpan] {
        self.detection.as_ref().map(|d| d.spans.as_slice()).unwrap_or(&[])
    }

    pub fn correction(&self) -> Option<&str> {
        self.report.as_ref().and_then(|r| r.correction.as_deref())
    }

    pub fn is_consistent(&self) -> bool {
        self.report.is_some() != self.failure.is_some()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FixError {
    #[error("span text is empty")]
    EmptySpanText,
    #[error("no error spans to evaluate")]
    NoSpans,
}

/// Non-overlapping, left-to-right, case-sensitive occurrence count.
pub fn count_occurrences(needle: &str, haystack: &str) -> usize {
    haystack.matches(needle).count()
}

/// A span counts as fixed when its text occurs fewer times in the correction
/// than in the original translation.
pub fn span_fixed(span_text: &str, original: &str, correction: &str) -> Result<bool, FixError> {
    if span_text.is_empty() {
        return Err(FixError::EmptySpanText);
    }
    Ok(count_occurrences(span_text, correction) < count_occurrences(span_text, original))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct FixCounts {
    pub fixed: usize,
    pub total: usize,
}

impl FixCounts {
    pub fn rate(&self) -> Result<f64, FixError> {
        if self.total == 0 {
            return Err(FixError::NoSpans);
        }
        Ok(self.fixed as f64 / self.total as f64)
    }
}

/// Counts fixed spans over runs that produced a report. Spans of runs whose
/// report has no correction count as unfixed; failed runs are skipped.
pub fn fix_counts(runs: &[PipelineRun]) -> Result<FixCounts, FixError> {
    let mut counts = FixCounts::default();
    for run in runs.iter().filter(|r| r.report.is_some()) {
        for span in run.spans() {
            counts.total += 1;
            if let Some(correction) = run.correction() {
                if span_fixed(&span.text, &run.translation, correction)? {
                    counts.fixed += 1;
                }
            }
        }
    }
    Ok(counts)
}

pub fn fix_rate(runs: &[PipelineRun]) -> Result<f64, FixError> {
    fix_counts(runs)?.rate()
}
