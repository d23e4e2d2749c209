//! On-disk span record shared by the dataset, demo bank and QE wire formats.

use serde::{Deserialize, Serialize};

use crate::model::{char_slice, ErrorSpan, Severity};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpanRecord {
    pub start: usize,
    pub end: usize,
    pub severity: Severity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl SpanRecord {
    /// Resolves the record against `translation`; `None` when the offsets
    /// are empty or out of bounds.
    pub fn resolve(&self, translation: &str) -> Option<ErrorSpan> {
        if self.start >= self.end {
            return None;
        }
        let text = char_slice(translation, self.start, self.end)?;
        Some(ErrorSpan {
            start: self.start,
            end: self.end,
            severity: self.severity,
            category: self.category.clone(),
            text: text.to_string(),
        })
    }
}

impl From<&ErrorSpan> for SpanRecord {
    fn from(span: &ErrorSpan) -> Self {
        Self {
            start: span.start,
            end: span.end,
            severity: span.severity,
            category: span.category.clone(),
        }
    }
}
