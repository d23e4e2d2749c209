//! Core building blocks for explaining and correcting machine-translation
//! error spans: the span model, inline markup codec, quality buckets, prompt
//! construction, completion parsing, hybrid routing, lexical metrics and
//! human-evaluation statistics.
//!
//! Everything in this crate is pure and free of I/O except the dataset,
//! demo-bank and ratings loaders.

pub mod analytics;
pub mod dataset;
pub mod markup;
pub mod metrics;
pub mod model;
pub mod parser;
pub mod prompting;
pub mod records;
pub mod router;
pub mod run;
pub mod scorer;
pub mod scoring;

pub use markup::{parse_marked, serialize_marked, MarkedTranslation, MarkupError, ParsedMarkup};
pub use model::{validate_sample, ErrorSpan, LanguagePair, QualityAssessment, QualityBucket, Sample, Score, Severity};
pub use parser::{parse_output, parse_output_lenient, unescape_entities, Diagnostic, ExplanationReport};
pub use prompting::{build_explain_prompt, build_translation_prompt, default_demo_set, DemoBank, Prompt, PromptSpec};
pub use router::{route, split_dev, tune_threshold, RoutingDecision};
pub use run::{fix_rate, span_fixed, DetectionResult, DetectorRef, PipelineRun};
pub use scorer::Scorer;
pub use scoring::{mqm_raw_score, BucketConfig, PenaltyWeights};
