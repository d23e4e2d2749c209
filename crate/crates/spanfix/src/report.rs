//! Human-evaluation report tables as CSV plus a markdown summary.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use spanfix_core::analytics::{
    category_breakdown, delta_by_relatedness, helpfulness_summary, mean, relatedness_by_span_count,
    relatedness_summary, AnalyticsError, Dimension, Level, Rating, SampleInfo,
};
use spanfix_core::metrics::{chrf, ChrfParams};
use spanfix_core::model::Sample;
use spanfix_core::run::PipelineRun;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("span labels line {line}: {message}")]
    Labels { line: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Whether a detected span is a real error, for the category breakdown.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpanLabel {
    pub sample_id: String,
    pub span_index: u32,
    pub correct: bool,
}

pub fn parse_span_labels(text: &str) -> Result<Vec<SpanLabel>, ReportError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ReportError::Labels {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Fixed-precision rendering; undefined values print as `undefined`.
pub fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "undefined".into(),
    }
}

fn csv_string(header: &[&str], rows: Vec<Vec<String>>) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub struct ReportInputs<'a> {
    pub ratings: &'a [Rating],
    pub runs: &'a [PipelineRun],
    pub samples: Option<&'a [Sample]>,
    pub span_labels: Option<&'a [SpanLabel]>,
    pub span_cap: usize,
}

impl ReportInputs<'_> {
    fn sources(&self) -> HashMap<String, String> {
        self.runs
            .iter()
            .filter_map(|r| {
                r.detection
                    .as_ref()
                    .map(|d| (r.sample_id.clone(), d.source_tag.clone()))
            })
            .collect()
    }
}

/// Named CSV tables in output order.
pub fn build_tables(inputs: &ReportInputs<'_>) -> Result<Vec<(&'static str, String)>, ReportError> {
    let sources = inputs.sources();
    let mut tables = Vec::new();

    // Helpfulness-only studies have no relatedness table.
    if inputs.ratings.iter().any(|r| r.dimension == Dimension::Relatedness) {
        let rel = relatedness_summary(inputs.ratings, &sources)?;
        let mut rows: Vec<Vec<String>> = rel
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.group.clone(),
                    r.source.clone(),
                    r.n.to_string(),
                    fmt_opt(r.mean),
                    fmt_opt(r.sd),
                ]
            })
            .collect();
        rows.extend(rel.correlations.iter().map(|c| {
            vec![
                "spearman_explanation_document".into(),
                c.source.clone(),
                c.n_samples.to_string(),
                fmt_opt(c.spearman),
                String::new(),
            ]
        }));
        tables.push((
            "relatedness",
            csv_string(&["level", "source", "n", "mean", "sd"], rows)?,
        ));
    }

    let help = helpfulness_summary(inputs.ratings, &sources);
    let rows = help
        .iter()
        .map(|r| {
            vec![
                r.group.clone(),
                r.source.clone(),
                r.n.to_string(),
                fmt_opt(r.mean),
                fmt_opt(r.sd),
            ]
        })
        .collect();
    tables.push((
        "helpfulness",
        csv_string(&["dimension", "source", "n", "mean", "sd"], rows)?,
    ));

    if let Some(labels) = inputs.span_labels {
        let mut per_span: BTreeMap<(&str, u32), Vec<f64>> = BTreeMap::new();
        for r in inputs
            .ratings
            .iter()
            .filter(|r| r.level == Level::Explanation && r.dimension == Dimension::Relatedness)
        {
            if let Some(i) = r.span_index {
                per_span
                    .entry((r.sample_id.as_str(), i))
                    .or_default()
                    .push(f64::from(r.value));
            }
        }
        let items: Vec<(bool, f64)> = labels
            .iter()
            .filter_map(|l| {
                let values = per_span.get(&(l.sample_id.as_str(), l.span_index))?;
                Some((l.correct, mean(values)?))
            })
            .collect();
        let rows = category_breakdown(&items)
            .iter()
            .map(|c| {
                vec![
                    c.category.as_str().to_string(),
                    c.count.to_string(),
                    format!("{:.4}", c.prevalence),
                    fmt_opt(c.mean_relatedness),
                ]
            })
            .collect();
        tables.push((
            "span_categories",
            csv_string(&["category", "count", "prevalence", "mean_relatedness"], rows)?,
        ));
    }

    let info: HashMap<String, SampleInfo> = inputs
        .runs
        .iter()
        .map(|r| {
            (
                r.sample_id.clone(),
                SampleInfo {
                    span_count: r.spans().len(),
                    source: sources.get(&r.sample_id).cloned().unwrap_or_else(|| "unknown".into()),
                },
            )
        })
        .collect();
    let mut rows = Vec::new();
    for level in [Level::Explanation, Level::Document] {
        for bin in relatedness_by_span_count(inputs.ratings, &info, level, inputs.span_cap) {
            rows.push(vec![
                level.to_string(),
                bin.source,
                bin.bin,
                bin.n.to_string(),
                fmt_opt(bin.mean),
            ]);
        }
    }
    tables.push((
        "relatedness_by_span_count",
        csv_string(&["level", "source", "span_count", "n", "mean_relatedness"], rows)?,
    ));

    if let Some(samples) = inputs.samples {
        let refs: HashMap<&str, &str> = samples
            .iter()
            .filter_map(|s| s.reference.as_deref().map(|r| (s.id.as_str(), r)))
            .collect();
        let mut doc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in inputs
            .ratings
            .iter()
            .filter(|r| r.level == Level::Document && r.dimension == Dimension::Relatedness)
        {
            doc.entry(r.sample_id.as_str()).or_default().push(f64::from(r.value));
        }
        let params = ChrfParams::default();
        let items: Vec<(f64, f64, f64)> = inputs
            .runs
            .iter()
            .filter_map(|run| {
                let reference = refs.get(run.sample_id.as_str())?;
                let correction = run.correction()?;
                let rel = mean(doc.get(run.sample_id.as_str())?)?;
                Some((
                    rel,
                    chrf(&run.translation, reference, &params),
                    chrf(correction, reference, &params),
                ))
            })
            .collect();
        let summary = delta_by_relatedness(&items);
        let mut rows: Vec<Vec<String>> = summary
            .bins
            .iter()
            .map(|b| vec![b.bin.to_string(), b.n.to_string(), format!("{:.4}", b.mean_delta)])
            .collect();
        rows.push(vec![
            "pearson_relatedness_original".into(),
            items.len().to_string(),
            fmt_opt(summary.pearson_relatedness_original),
        ]);
        tables.push((
            "delta_by_relatedness",
            csv_string(&["relatedness_bin", "n", "mean_chrf_delta"], rows)?,
        ));
    }
    Ok(tables)
}

/// Renders CSV tables as markdown sections.
pub fn markdown(tables: &[(&str, String)]) -> String {
    let mut out = String::from("# Human evaluation report\n");
    for (name, csv_text) in tables {
        out.push_str(&format!("\n## {name}\n\n"));
        let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
        let header: Vec<String> = reader
            .headers()
            .map(|h| h.iter().map(str::to_string).collect())
            .unwrap_or_default();
        out.push_str(&format!("| {} |\n", header.join(" | ")));
        out.push_str(&format!("|{}\n", " --- |".repeat(header.len())));
        for record in reader.records().flatten() {
            out.push_str(&format!("| {} |\n", record.iter().collect::<Vec<_>>().join(" | ")));
        }
    }
    out
}

/// Writes every table plus `report.md` into `dir`; returns written paths.
pub fn write_report(inputs: &ReportInputs<'_>, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReportError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let tables = build_tables(inputs)?;
    let mut written = Vec::new();
    for (name, text) in &tables {
        let path = dir.join(format!("{name}.csv"));
        fs::write(&path, text).map_err(io(&path))?;
        written.push(path);
    }
    let path = dir.join("report.md");
    fs::write(&path, markdown(&tables)).map_err(io(&path))?;
    written.push(path);
    Ok(written)
}
