//! Dataset ingestion and export.
//!
//! The canonical format is JSONL, one sample per line:
//!
//! ```json
//! {"id":"s1","lp":"en-de","src":"...","mt":"...","ref":"...",
//!  "spans":[{"start":12,"end":27,"severity":"major","category":"accuracy"}],
//!  "system":"sysA","score":0.8}
//! ```
//!
//! Text is NFC-normalized on the way in and span offsets count characters of
//! the normalized translation. Lines that fail validation are reported with
//! their line number instead of being dropped silently.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{merge_overlapping, nfc, validate_spans, ErrorSpan, LanguagePair, Sample, Severity};
use crate::records::SpanRecord;
use crate::scoring::BucketConfig;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("row {row}: {message}")]
    Schema { row: usize, message: String },
    #[error("row {row}: cannot reconstruct spans: {message}")]
    SpanReconstruction { row: usize, message: String },
    #[error("writing samples: {0}")]
    Write(#[from] io::Error),
}

/// A problem tied to one input line (JSONL) or row (TSV, 1-based after the header).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub samples: Vec<Sample>,
    pub errors: Vec<LineError>,
    pub warnings: Vec<LineError>,
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    pub buckets: BucketConfig,
    /// Merge overlapping spans instead of rejecting the sample.
    pub merge_overlaps: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub lp: LanguagePair,
    pub src: String,
    pub mt: String,
    #[serde(rename = "ref", default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default)]
    pub spans: Vec<SpanRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl From<&Sample> for SampleRecord {
    fn from(s: &Sample) -> Self {
        Self {
            id: s.id.clone(),
            lp: s.lp.clone(),
            src: s.source.clone(),
            mt: s.translation.clone(),
            reference: s.reference.clone(),
            spans: s.spans.iter().map(SpanRecord::from).collect(),
            system: s.system.clone(),
            score: s.gold_quality.map(|q| q.raw),
        }
    }
}

fn finalize_spans(translation: &str, mut spans: Vec<ErrorSpan>, merge: bool) -> Result<Vec<ErrorSpan>, String> {
    spans.sort_by_key(|s| (s.start, s.end));
    spans.dedup_by(|b, a| {
        let same = a.start == b.start && a.end == b.end;
        if same {
            a.severity = a.severity.max(b.severity);
        }
        same
    });
    if merge {
        spans = merge_overlapping(translation, &spans);
    }
    let violations = validate_spans(translation, &spans);
    if violations.is_empty() {
        Ok(spans)
    } else {
        Err(violations.join("; "))
    }
}

impl SampleRecord {
    pub fn into_sample(self, opts: &IngestOptions) -> Result<Sample, String> {
        let translation = nfc(&self.mt);
        let mut spans = Vec::with_capacity(self.spans.len());
        for (i, rec) in self.spans.iter().enumerate() {
            let span = rec.resolve(&translation).ok_or_else(|| {
                format!(
                    "span {i} [{}, {}) is empty or exceeds translation length {}",
                    rec.start,
                    rec.end,
                    translation.chars().count()
                )
            })?;
            spans.push(span);
        }
        let spans = finalize_spans(&translation, spans, opts.merge_overlaps)?;
        let gold_quality = match self.score {
            Some(raw) => Some(opts.buckets.assess(raw).map_err(|e| format!("score: {e}"))?),
            None => None,
        };
        if self.id.is_empty() {
            return Err("id: must not be empty".into());
        }
        Ok(Sample {
            id: self.id,
            lp: self.lp,
            source: nfc(&self.src),
            translation,
            reference: self.reference.as_deref().map(nfc),
            spans,
            system: self.system,
            gold_quality,
        })
    }
}

pub fn parse_jsonl(text: &str, opts: &IngestOptions) -> IngestReport {
    let mut report = IngestReport::default();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let result = serde_json::from_str::<SampleRecord>(line)
            .map_err(|e| e.to_string())
            .and_then(|rec| rec.into_sample(opts))
            .and_then(|s| {
                if seen.insert(s.id.clone()) {
                    Ok(s)
                } else {
                    Err(format!("duplicate id {:?}", s.id))
                }
            });
        match result {
            Ok(sample) => report.samples.push(sample),
            Err(message) => report.errors.push(LineError { line: line_no, message }),
        }
    }
    report
}

pub fn ingest_jsonl(path: &Path, opts: &IngestOptions) -> Result<IngestReport, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(parse_jsonl(&text, opts))
}

pub fn export_jsonl<W: Write>(samples: &[Sample], mut out: W) -> Result<(), DatasetError> {
    for s in samples {
        let line = serde_json::to_string(&SampleRecord::from(s)).map_err(io::Error::other)?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Column names and span delimiters of an MQM TSV dump. Shared-task releases
/// differ between years, so nothing here is hardcoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsvConfig {
    pub system: String,
    pub doc: String,
    pub segment: String,
    pub source: String,
    pub target: String,
    pub severity: String,
    pub category: String,
    pub open_delimiter: String,
    pub close_delimiter: String,
    pub merge_overlaps: bool,
}

impl Default for TsvConfig {
    fn default() -> Self {
        Self {
            system: "system".into(),
            doc: "doc".into(),
            segment: "seg_id".into(),
            source: "source".into(),
            target: "target".into(),
            severity: "severity".into(),
            category: "category".into(),
            open_delimiter: "<v>".into(),
            close_delimiter: "</v>".into(),
            merge_overlaps: false,
        }
    }
}

/// Strips inline delimiters and returns the plain text with character spans.
pub fn strip_delimiters(text: &str, open: &str, close: &str) -> Result<(String, Vec<(usize, usize)>), String> {
    let mut plain = String::with_capacity(text.len());
    let mut plain_len = 0usize;
    let mut spans = Vec::new();
    let mut open_at: Option<usize> = None;
    let mut rest = text;
    while !rest.is_empty() {
        if let Some(after) = rest.strip_prefix(open) {
            if open_at.is_some() {
                return Err(format!("nested {open}"));
            }
            open_at = Some(plain_len);
            rest = after;
        } else if let Some(after) = rest.strip_prefix(close) {
            let start = open_at.take().ok_or_else(|| format!("{close} without {open}"))?;
            if start == plain_len {
                return Err("empty delimited span".into());
            }
            spans.push((start, plain_len));
            rest = after;
        } else {
            let c = rest.chars().next().unwrap_or_default();
            plain.push(c);
            plain_len += 1;
            rest = &rest[c.len_utf8()..];
        }
    }
    if open_at.is_some() {
        return Err(format!("{open} without {close}"));
    }
    Ok((plain, spans))
}

fn parse_severity(raw: &str) -> Result<Option<Severity>, String> {
    let norm = raw.trim().to_ascii_lowercase();
    match norm.as_str() {
        "no-error" | "no error" | "noerror" | "neutral" | "" => Ok(None),
        other => other.parse::<Severity>().map(Some).map_err(|e| e.to_string()),
    }
}

struct Group {
    sample: Sample,
    spans: Vec<ErrorSpan>,
    first_row: usize,
}

pub fn parse_mqm_tsv(text: &str, lp: &LanguagePair, cfg: &TsvConfig) -> Result<IngestReport, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| DatasetError::Schema {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let required = |name: &str| {
        col(name).ok_or_else(|| DatasetError::Schema {
            row: 0,
            message: format!("missing column {name:?}"),
        })
    };
    let c_system = required(&cfg.system)?;
    let c_segment = required(&cfg.segment)?;
    let c_source = required(&cfg.source)?;
    let c_target = required(&cfg.target)?;
    let c_severity = required(&cfg.severity)?;
    let c_doc = col(&cfg.doc);
    let c_category = col(&cfg.category);

    let mut report = IngestReport::default();
    let mut groups: Vec<Group> = Vec::new();
    let mut index: HashMap<(String, String, String), usize> = HashMap::new();

    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| DatasetError::Schema {
            row,
            message: e.to_string(),
        })?;
        let field = |c: usize| record.get(c).unwrap_or("").to_string();
        let system = field(c_system);
        let doc = c_doc.map(field).unwrap_or_default();
        let segment = field(c_segment);
        let target = nfc(&field(c_target));
        let (plain, offsets) = strip_delimiters(&target, &cfg.open_delimiter, &cfg.close_delimiter)
            .map_err(|message| DatasetError::SpanReconstruction { row, message })?;
        let severity = parse_severity(&field(c_severity)).map_err(|message| DatasetError::Schema { row, message })?;
        let category = c_category.map(field).filter(|c| !c.is_empty());

        let key = (system.clone(), doc.clone(), segment.clone());
        let slot = match index.get(&key) {
            Some(&slot) => {
                if groups[slot].sample.translation != plain {
                    return Err(DatasetError::Schema {
                        row,
                        message: format!("target differs from row {} of the same segment", groups[slot].first_row),
                    });
                }
                slot
            }
            None => {
                let id = if doc.is_empty() {
                    format!("{segment}:{system}")
                } else {
                    format!("{doc}:{segment}:{system}")
                };
                let mut sample = Sample::new(id, lp.clone(), nfc(&field(c_source)), plain.clone());
                sample.system = Some(system.clone()).filter(|s| !s.is_empty());
                groups.push(Group {
                    sample,
                    spans: Vec::new(),
                    first_row: row,
                });
                index.insert(key, groups.len() - 1);
                groups.len() - 1
            }
        };
        match severity {
            None => {}
            Some(sev) if offsets.is_empty() => report.warnings.push(LineError {
                line: row,
                message: format!("{sev} error without a target span; not representable, skipped"),
            }),
            Some(sev) => {
                for (start, end) in offsets {
                    let mut span =
                        ErrorSpan::over(&plain, start, end, sev).map_err(|e| DatasetError::SpanReconstruction {
                            row,
                            message: e.to_string(),
                        })?;
                    span.category = category.clone();
                    groups[slot].spans.push(span);
                }
            }
        }
    }

    for group in groups {
        let Group {
            mut sample,
            spans,
            first_row,
        } = group;
        sample.spans =
            finalize_spans(&sample.translation, spans, cfg.merge_overlaps).map_err(|message| DatasetError::Schema {
                row: first_row,
                message,
            })?;
        report.samples.push(sample);
    }
    Ok(report)
}

pub fn ingest_mqm_tsv(path: &Path, lp: &LanguagePair, cfg: &TsvConfig) -> Result<IngestReport, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_mqm_tsv(&text, lp, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub n_samples: usize,
    pub n_spans: usize,
    /// Mean whitespace-delimited words per source.
    pub avg_input_words: f64,
    /// Mean whitespace-delimited words per span text.
    pub avg_span_words: f64,
}

pub fn dataset_stats(samples: &[Sample]) -> DatasetStats {
    let n_spans: usize = samples.iter().map(|s| s.spans.len()).sum();
    let input_words: usize = samples.iter().map(|s| s.source.split_whitespace().count()).sum();
    let span_words: usize = samples
        .iter()
        .flat_map(|s| &s.spans)
        .map(|sp| sp.text.split_whitespace().count())
        .sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    DatasetStats {
        n_samples: samples.len(),
        n_spans,
        avg_input_words: ratio(input_words, samples.len()),
        avg_span_words: ratio(span_words, n_spans),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINES: &str = concat!(
        r#"{"id":"a","lp":"en-de","src":"Hello world","mt":"Hallo Welt","spans":[{"start":6,"end":10,"severity":"minor"}]}"#,
        "\n",
        r#"{"id":"b","lp":"en-de","src":"Yes","mt":"Ja","ref":"Ja","spans":[],"score":0.9}"#,
        "\n",
        r#"{"id":"c","lp":"zh-en","src":"你好","mt":"Hi there","spans":[{"start":0,"end":2,"severity":"major","category":"accuracy"}],"system":"sysA"}"#,
        "\n"
    );

    #[test]
    fn ingests_valid_lines() {
        let report = parse_jsonl(LINES, &IngestOptions::default());
        assert_eq!(report.samples.len(), 3);
        assert!(report.errors.is_empty());
        assert_eq!(report.samples[0].spans[0].text, "Welt");
        assert_eq!(
            report.samples[1].gold_quality.unwrap().bucket,
            crate::model::QualityBucket::Excellent
        );
    }

    #[test]
    fn reports_out_of_range_span_with_line_number() {
        let bad = LINES.replace(r#""start":0,"end":2"#, r#""start":0,"end":42"#);
        let report = parse_jsonl(&bad, &IngestOptions::default());
        assert_eq!(report.samples.len(), 2);
        assert_eq!(report.errors.len(), 1);
        assert_eq!(report.errors[0].line, 3);
    }

    #[test]
    fn crlf_matches_lf() {
        let crlf = LINES.replace('\n', "\r\n");
        assert_eq!(
            parse_jsonl(&crlf, &IngestOptions::default()),
            parse_jsonl(LINES, &IngestOptions::default())
        );
    }

    #[test]
    fn overlaps_rejected_unless_merging() {
        let line = r#"{"id":"o","lp":"en-de","src":"s","mt":"abcdefgh","spans":[{"start":0,"end":4,"severity":"minor"},{"start":2,"end":6,"severity":"major"}]}"#;
        assert_eq!(parse_jsonl(line, &IngestOptions::default()).errors.len(), 1);
        let opts = IngestOptions {
            merge_overlaps: true,
            ..IngestOptions::default()
        };
        let report = parse_jsonl(line, &opts);
        assert_eq!(report.samples[0].spans.len(), 1);
        assert_eq!(report.samples[0].spans[0].text, "abcdef");
    }

    #[test]
    fn duplicate_ids_are_errors() {
        let line = r#"{"id":"a","lp":"en-de","src":"s","mt":"m"}"#;
        let report = parse_jsonl(&format!("{line}\n{line}\n"), &IngestOptions::default());
        assert_eq!(report.samples.len(), 1);
        assert_eq!(report.errors[0].line, 2);
    }

    #[test]
    fn offsets_follow_nfc() {
        // "e" + combining acute composes to one character under NFC.
        let line = "{\"id\":\"n\",\"lp\":\"en-de\",\"src\":\"s\",\"mt\":\"Cafe\u{301} au lait\",\"spans\":[{\"start\":5,\"end\":7,\"severity\":\"minor\"}]}";
        let report = parse_jsonl(line, &IngestOptions::default());
        assert_eq!(report.samples[0].translation, "Café au lait");
        assert_eq!(report.samples[0].spans[0].text, "au");
    }

    #[test]
    fn export_reingest_is_fixpoint() {
        let first = parse_jsonl(LINES, &IngestOptions::default()).samples;
        let mut buf = Vec::new();
        export_jsonl(&first, &mut buf).unwrap();
        let second = parse_jsonl(&String::from_utf8(buf).unwrap(), &IngestOptions::default()).samples;
        assert_eq!(first, second);
    }

    fn tsv(rows: &[&str]) -> String {
        let mut text = "system\tdoc\tseg_id\tsource\ttarget\tcategory\tseverity\n".to_string();
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        text
    }

    #[test]
    fn tsv_single_row_span() {
        let text = tsv(&["sysA\td1\t1\tX Y Z\tA <v>B</v> C\tAccuracy/Mistranslation\tMajor"]);
        let report = parse_mqm_tsv(&text, &"en-de".parse().unwrap(), &TsvConfig::default()).unwrap();
        let s = &report.samples[0];
        assert_eq!(s.translation, "A B C");
        assert_eq!((s.spans[0].start, s.spans[0].end), (2, 3));
        assert_eq!(s.spans[0].text, "B");
        assert_eq!(s.spans[0].severity, Severity::Major);
        assert_eq!(s.spans[0].category.as_deref(), Some("Accuracy/Mistranslation"));
    }

    #[test]
    fn tsv_no_error_and_grouping() {
        let text = tsv(&[
            "sysA\td1\t1\tsrc\tA B C\tNo-error\tno-error",
            "sysA\td1\t2\tsrc2\t<v>D</v> E F\tFluency\tMinor",
            "sysA\td1\t2\tsrc2\tD E <v>F</v>\tAccuracy\tCritical",
        ]);
        let report = parse_mqm_tsv(&text, &"en-de".parse().unwrap(), &TsvConfig::default()).unwrap();
        assert_eq!(report.samples.len(), 2);
        assert!(report.samples[0].spans.is_empty());
        assert_eq!(report.samples[1].spans.len(), 2);
        assert_eq!(report.samples[1].id, "d1:2:sysA");
    }

    #[test]
    fn tsv_unbalanced_delimiter() {
        let text = tsv(&["sysA\td1\t1\tsrc\tok\tX\tminor", "sysA\td1\t2\tsrc\tA <v>B C\tX\tminor"]);
        let err = parse_mqm_tsv(&text, &"en-de".parse().unwrap(), &TsvConfig::default()).unwrap_err();
        assert!(matches!(err, DatasetError::SpanReconstruction { row: 2, .. }));
    }

    #[test]
    fn tsv_missing_column() {
        let text = "system\tseg_id\tsource\n";
        assert!(matches!(
            parse_mqm_tsv(text, &"en-de".parse().unwrap(), &TsvConfig::default()),
            Err(DatasetError::Schema { row: 0, .. })
        ));
    }

    #[test]
    fn stats_columns() {
        let samples = parse_jsonl(LINES, &IngestOptions::default()).samples;
        let stats = dataset_stats(&samples);
        assert_eq!(stats.n_samples, 3);
        assert_eq!(stats.n_spans, 2);
        assert!((stats.avg_input_words - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(stats.avg_span_words, 1.0);
    }
}
