//! Prompt construction for explanation + correction and for plain translation.
//!
//! An explain prompt is the instruction paragraph, then `k` worked demos, then
//! the query block, each separated by one blank line:
//!
//! ```text
//! English source: All were wearing avalanche beacons.
//! German translation: Alle trugen Lawinenschilder.
//! Translation quality analysis: Alle trugen <error1 severity="major">Lawinenschilder</error1>.
//! Translation quality score: weak
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::markup::{serialize_marked, MarkupError};
use crate::model::{validate_spans, ErrorSpan, LanguagePair, QualityAssessment, QualityBucket, Sample};
use crate::records::SpanRecord;

pub const INSTRUCTION: &str = "You are provided with a Source, Translation, Translation quality analysis, and Translation quality score (weak, moderate, good, excellent, best). The Translation quality analysis contains a translation with marked error spans with different levels of severity (minor or major). Given this information, generate an explanation for each error and a fully correct translation.";

/// Instruction used when a reference translation is part of the input.
pub const INSTRUCTION_WITH_REFERENCE: &str = "You are provided with a Source, Translation, Reference, Translation quality analysis, and Translation quality score (weak, moderate, good, excellent, best). The Translation quality analysis contains a translation with marked error spans with different levels of severity (minor or major). Given this information, generate an explanation for each error and a fully correct translation.";

pub const ANALYSIS_LABEL: &str = "Translation quality analysis:";
pub const SCORE_LABEL: &str = "Translation quality score:";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("sample {0} has no reference but the prompt requires one")]
    MissingReference(String),
    #[error(transparent)]
    InvalidSpans(#[from] MarkupError),
    #[error("invalid prompt spec: {0}")]
    InvalidSpec(String),
    #[error("source text is empty")]
    EmptySource,
    #[error("no display name for language code {0:?}")]
    UnknownLanguage(String),
    #[error("unsupported shot count {0}; only 0, 1 and 5 have a default demo set")]
    UnsupportedK(usize),
    #[error("demo bank has {found} {lp} demos, {needed} needed")]
    DemoBankShort { lp: String, needed: usize, found: usize },
    #[error("demo bank {path}: line {line}: {message}")]
    DemoBank { path: String, line: usize, message: String },
    #[error("reading demo bank: {0}")]
    Io(#[from] std::io::Error),
}

/// Language code to English display name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LanguageNames(BTreeMap<String, String>);

impl Default for LanguageNames {
    fn default() -> Self {
        let pairs = [
            ("en", "English"),
            ("de", "German"),
            ("he", "Hebrew"),
            ("zh", "Chinese"),
            ("ru", "Russian"),
            ("cs", "Czech"),
            ("uk", "Ukrainian"),
            ("ja", "Japanese"),
            ("fr", "French"),
            ("es", "Spanish"),
            ("pt", "Portuguese"),
            ("it", "Italian"),
            ("nl", "Dutch"),
            ("ko", "Korean"),
            ("is", "Icelandic"),
            ("hi", "Hindi"),
        ];
        Self(pairs.into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
    }
}

impl LanguageNames {
    pub fn with_overrides(mut self, extra: &BTreeMap<String, String>) -> Self {
        self.0.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        self
    }

    pub fn name(&self, code: &str) -> Result<&str, PromptError> {
        self.0
            .get(code)
            .map(String::as_str)
            .ok_or_else(|| PromptError::UnknownLanguage(code.to_string()))
    }
}

/// A fully worked demonstration: input fields plus its gold output.
#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    pub lp: LanguagePair,
    pub source: String,
    pub translation: String,
    pub reference: Option<String>,
    pub spans: Vec<ErrorSpan>,
    pub bucket: QualityBucket,
    pub explanations: Vec<String>,
    pub correction: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoRecord {
    lp: LanguagePair,
    source: String,
    translation: String,
    #[serde(default)]
    reference: Option<String>,
    spans: Vec<SpanRecord>,
    bucket: QualityBucket,
    explanations: Vec<String>,
    correction: String,
}

/// Ordered collection of demos loaded from a JSONL file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DemoBank {
    demos: Vec<Demo>,
}

impl DemoBank {
    pub fn new(demos: Vec<Demo>) -> Self {
        Self { demos }
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, PromptError> {
        let mut demos = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| PromptError::DemoBank {
                path: origin.to_string(),
                line: idx + 1,
                message,
            };
            let rec: DemoRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            let spans = rec
                .spans
                .iter()
                .map(|s| s.resolve(&rec.translation))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| err("span offsets out of range".to_string()))?;
            let violations = validate_spans(&rec.translation, &spans);
            if !violations.is_empty() {
                return Err(err(violations.join("; ")));
            }
            if rec.explanations.len() != spans.len() {
                return Err(err(format!(
                    "{} explanations for {} spans",
                    rec.explanations.len(),
                    spans.len()
                )));
            }
            demos.push(Demo {
                lp: rec.lp,
                source: rec.source,
                translation: rec.translation,
                reference: rec.reference,
                spans,
                bucket: rec.bucket,
                explanations: rec.explanations,
                correction: rec.correction,
            });
        }
        Ok(Self { demos })
    }

    pub fn demos(&self) -> &[Demo] {
        &self.demos
    }

    fn take(&self, lp: &str, n: usize) -> Result<Vec<Demo>, PromptError> {
        let found: Vec<Demo> = self
            .demos
            .iter()
            .filter(|d| d.lp.to_string() == lp)
            .take(n)
            .cloned()
            .collect();
        if found.len() < n {
            return Err(PromptError::DemoBankShort {
                lp: lp.to_string(),
                needed: n,
                found: found.len(),
            });
        }
        Ok(found)
    }
}

/// Demo composition per shot count: one matching demo for 1-shot (en-de for
/// en-de, zh-en otherwise) and a fixed 3 en-de / 1 en-ru / 1 zh-en mix for
/// 5-shot.
pub fn default_demo_set(bank: &DemoBank, lp: &LanguagePair, k: usize) -> Result<Vec<Demo>, PromptError> {
    match k {
        0 => Ok(Vec::new()),
        1 => {
            let pick = if lp.to_string() == "en-de" { "en-de" } else { "zh-en" };
            bank.take(pick, 1)
        }
        5 => {
            let mut demos = bank.take("en-de", 3)?;
            demos.extend(bank.take("en-ru", 1)?);
            demos.extend(bank.take("zh-en", 1)?);
            Ok(demos)
        }
        other => Err(PromptError::UnsupportedK(other)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    ExplainCorrect,
    TranslationOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    pub mode: PromptMode,
    pub use_reference: bool,
    pub k: usize,
    pub demos: Vec<Demo>,
}

impl PromptSpec {
    pub fn explain(use_reference: bool, demos: Vec<Demo>) -> Self {
        Self {
            mode: PromptMode::ExplainCorrect,
            use_reference,
            k: demos.len(),
            demos,
        }
    }

    pub fn translation_only() -> Self {
        Self {
            mode: PromptMode::TranslationOnly,
            use_reference: false,
            k: 0,
            demos: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.k != self.demos.len() {
            return Err(PromptError::InvalidSpec(format!(
                "k = {} but {} demos given",
                self.k,
                self.demos.len()
            )));
        }
        if self.mode == PromptMode::TranslationOnly && (self.k != 0 || self.use_reference) {
            return Err(PromptError::InvalidSpec(
                "translation-only prompts take no demos and no reference".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub n_spans: usize,
}

struct Block<'a> {
    lp: &'a LanguagePair,
    source: &'a str,
    translation: &'a str,
    reference: Option<&'a str>,
    spans: &'a [ErrorSpan],
    bucket: QualityBucket,
}

fn render_block(block: &Block<'_>, names: &LanguageNames) -> Result<String, PromptError> {
    let src = names.name(block.lp.src())?;
    let tgt = names.name(block.lp.tgt())?;
    let marked = serialize_marked(block.translation, block.spans)?;
    let mut lines = vec![
        format!("{src} source: {}", block.source),
        format!("{tgt} translation: {}", block.translation),
    ];
    if let Some(reference) = block.reference {
        lines.push(format!("{tgt} reference: {reference}"));
    }
    lines.push(format!("{ANALYSIS_LABEL} {marked}"));
    lines.push(format!("{SCORE_LABEL} {}", block.bucket));
    Ok(lines.join("\n"))
}

/// Renders a demo's gold output in the format the model is asked to produce.
pub fn render_output(explanations: &[String], correction: &str) -> String {
    let mut lines: Vec<String> = explanations
        .iter()
        .enumerate()
        .map(|(i, e)| format!("Explanation for error{}: {e}", i + 1))
        .collect();
    lines.push(format!("Translation correction: {correction}"));
    lines.join("\n")
}

pub fn build_explain_prompt(
    sample: &Sample,
    spec: &PromptSpec,
    quality: &QualityAssessment,
    names: &LanguageNames,
) -> Result<Prompt, PromptError> {
    spec.validate()?;
    if spec.mode != PromptMode::ExplainCorrect {
        return Err(PromptError::InvalidSpec(
            "explain prompt requires explain_correct mode".into(),
        ));
    }
    let reference = if spec.use_reference {
        Some(
            sample
                .reference
                .as_deref()
                .ok_or_else(|| PromptError::MissingReference(sample.id.clone()))?,
        )
    } else {
        None
    };
    let mut parts = vec![if spec.use_reference {
        INSTRUCTION_WITH_REFERENCE.to_string()
    } else {
        INSTRUCTION.to_string()
    }];
    for demo in &spec.demos {
        let block = Block {
            lp: &demo.lp,
            source: &demo.source,
            translation: &demo.translation,
            reference: if spec.use_reference {
                demo.reference.as_deref()
            } else {
                None
            },
            spans: &demo.spans,
            bucket: demo.bucket,
        };
        let input = render_block(&block, names)?;
        parts.push(format!(
            "{input}\n{}",
            render_output(&demo.explanations, &demo.correction)
        ));
    }
    let query = Block {
        lp: &sample.lp,
        source: &sample.source,
        translation: &sample.translation,
        reference,
        spans: &sample.spans,
        bucket: quality.bucket,
    };
    parts.push(render_block(&query, names)?);
    let mut text = parts.join("\n\n");
    text.push('\n');
    Ok(Prompt {
        text,
        n_spans: sample.spans.len(),
    })
}

pub fn build_translation_prompt(sample: &Sample, names: &LanguageNames) -> Result<Prompt, PromptError> {
    if sample.source.trim().is_empty() {
        return Err(PromptError::EmptySource);
    }
    let src = names.name(sample.lp.src())?;
    let tgt = names.name(sample.lp.tgt())?;
    Ok(Prompt {
        text: format!(
            "Translate the following {src} source text to {tgt}:\n{src} source: {}\n{tgt} translation:",
            sample.source
        ),
        n_spans: 0,
    })
}

/// Extracts the marked translation of the final (query) block of a prompt.
pub fn query_analysis_line(prompt: &str) -> Option<&str> {
    prompt
        .lines()
        .rev()
        .find_map(|line| line.strip_prefix(ANALYSIS_LABEL))
        .map(|rest| rest.strip_prefix(' ').unwrap_or(rest))
}
