use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use spanfix::pipeline::{explain_and_correct, explain_batch, ExplainContext, RunCache};
use spanfix_client::{Detector, Fallback, GenParams, LlmClient, MockBackend, QeClient, RetryPolicy};
use spanfix_core::dataset::{ingest_jsonl, IngestOptions};
use spanfix_core::markup::parse_marked;
use spanfix_core::model::Sample;
use spanfix_core::prompting::{default_demo_set, DemoBank, LanguageNames, PromptSpec};
use spanfix_core::run::{fix_rate, Stage};
use std::time::Duration;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn load(name: &str) -> Vec<Sample> {
    let report = ingest_jsonl(&data(name), &IngestOptions::default()).unwrap();
    assert!(report.errors.is_empty(), "{:?}", report.errors);
    report.samples
}

fn human(name: &str) -> Detector {
    Detector::Human {
        path: data(name).display().to_string(),
    }
}

fn ctx(backend: Arc<MockBackend>, cache: Option<RunCache>) -> ExplainContext {
    let retry = RetryPolicy {
        base: Duration::from_millis(1),
        jitter: false,
        ..RetryPolicy::default()
    };
    ExplainContext {
        client: LlmClient::new(backend, GenParams::default()).with_retry(retry),
        names: LanguageNames::default(),
        buckets: Default::default(),
        weights: Default::default(),
        max_in_flight: 4,
        cache,
    }
}

fn worked_reply() -> String {
    let line = std::fs::read_to_string(data("worked_example/replies.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    v["reply"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn worked_example_avalanche() {
    let sample = load("worked_example/samples.jsonl").remove(0);
    let backend = Arc::new(MockBackend::fixed(worked_reply()));
    let ctx = ctx(backend, None);
    let run = explain_and_correct(
        &ctx,
        &sample,
        &human("worked_example/samples.jsonl"),
        &PromptSpec::explain(false, vec![]),
    )
    .await;
    assert!(run.failure.is_none(), "{:?}", run.failure);
    let report = run.report.as_ref().unwrap();
    assert_eq!(report.explanations.len(), 1);
    assert!(report.explanations[&1].starts_with("The term \"Lawinenschilder\""));
    assert_eq!(report.correction.as_deref(), Some("Alle trugen Lawinensuchgeräte."));
    assert!(report.diagnostics.is_empty());
    assert_eq!(run.quality.unwrap().bucket.to_string(), "weak");
    assert_eq!(fix_rate(std::slice::from_ref(&run)).unwrap(), 1.0);
}

#[tokio::test]
async fn zero_span_sample_passes_through() {
    let sample = load("synthetic.jsonl")
        .into_iter()
        .find(|s| s.spans.is_empty())
        .expect("fixture has zero-span samples");
    let reply = format!("Translation correction: {}", sample.translation);
    let backend = Arc::new(MockBackend::fixed(reply));
    let ctx = ctx(backend.clone(), None);
    let run = explain_and_correct(
        &ctx,
        &sample,
        &human("synthetic.jsonl"),
        &PromptSpec::explain(false, vec![]),
    )
    .await;
    assert_eq!(backend.calls(), 1, "zero-span samples still reach the model");
    let prompt = run.prompt.as_ref().unwrap();
    assert_eq!(prompt.n_spans, 0);
    assert!(prompt.text.contains(&format!(
        "Translation quality analysis: {}\n",
        sample.translation.replace('&', "&amp;")
    )));
    assert_eq!(run.correction(), Some(sample.translation.as_str()));
    assert!(run.report.unwrap().explanations.is_empty());
}

#[tokio::test]
async fn detector_failure_is_recorded() {
    let sample = load("synthetic.jsonl").remove(0);
    let backend = Arc::new(MockBackend::synthesizing());
    let ctx = ctx(backend.clone(), None);
    let detector = Detector::Qe {
        client: QeClient::new("http://127.0.0.1:9", Duration::from_millis(200)).unwrap(),
        use_reference: false,
    };
    let run = explain_and_correct(&ctx, &sample, &detector, &PromptSpec::explain(false, vec![])).await;
    let failure = run.failure.as_ref().expect("failure recorded");
    assert_eq!(failure.stage, Stage::Detect);
    assert!(failure.backend);
    assert!(run.report.is_none());
    assert!(run.prompt.is_none());
    assert_eq!(backend.calls(), 0);
}

#[tokio::test]
async fn llm_failure_is_recorded_per_sample() {
    let samples = load("synthetic.jsonl");
    let mut replies = HashMap::new();
    for s in samples.iter().filter(|s| s.id != "syn-05") {
        replies.insert(s.id.clone(), format!("Translation correction: {}", s.translation));
    }
    let backend = Arc::new(MockBackend::replay(replies, Fallback::Fail));
    let ctx = ctx(backend, None);
    let specs = vec![PromptSpec::explain(false, vec![]); samples.len()];
    let runs = explain_batch(&ctx, &samples, &human("synthetic.jsonl"), &specs).await;
    assert_eq!(runs.len(), samples.len());
    for (run, sample) in runs.iter().zip(&samples) {
        assert_eq!(run.sample_id, sample.id);
        assert_eq!(run.report.is_some(), run.failure.is_none(), "report xor failure");
        if sample.id == "syn-05" {
            assert_eq!(run.failure.as_ref().unwrap().stage, Stage::Complete);
        } else {
            assert!(run.failure.is_none());
        }
    }
}

#[tokio::test]
async fn prompts_round_trip_to_detected_spans() {
    let samples = load("synthetic.jsonl");
    let bank = DemoBank::load(&data("demos.jsonl")).unwrap();
    let backend = Arc::new(MockBackend::synthesizing());
    let ctx = ctx(backend, None);
    for k in [0, 1, 5] {
        let specs: Vec<PromptSpec> = samples
            .iter()
            .map(|s| PromptSpec::explain(k == 5, default_demo_set(&bank, &s.lp, k).unwrap()))
            .collect();
        let runs = explain_batch(&ctx, &samples, &human("synthetic.jsonl"), &specs).await;
        for run in &runs {
            let prompt = &run.prompt.as_ref().unwrap().text;
            let analysis = prompt
                .lines()
                .rev()
                .find_map(|l| l.strip_prefix("Translation quality analysis: "))
                .unwrap();
            let parsed = parse_marked(analysis).unwrap();
            assert_eq!(parsed.translation, run.translation);
            let want: Vec<_> = run.spans().iter().map(|s| (s.start, s.end, s.severity)).collect();
            let got: Vec<_> = parsed.spans.iter().map(|s| (s.start, s.end, s.severity)).collect();
            assert_eq!(got, want, "{}", run.sample_id);
        }
    }
}

#[tokio::test]
async fn cache_hits_skip_the_backend() {
    let dir = tempfile::tempdir().unwrap();
    let samples = load("synthetic.jsonl");
    let specs = vec![PromptSpec::explain(false, vec![]); samples.len()];
    let detector = human("synthetic.jsonl");

    let backend = Arc::new(MockBackend::synthesizing());
    let first_ctx = ctx(backend.clone(), Some(RunCache::open(dir.path()).unwrap()));
    let first = explain_batch(&first_ctx, &samples, &detector, &specs).await;
    assert_eq!(backend.calls(), samples.len());

    let backend2 = Arc::new(MockBackend::synthesizing());
    let second_ctx = ctx(backend2.clone(), Some(RunCache::open(dir.path()).unwrap()));
    let second = explain_batch(&second_ctx, &samples, &detector, &specs).await;
    assert_eq!(backend2.calls(), 0);
    assert_eq!(
        serde_json::to_string(&first).unwrap(),
        serde_json::to_string(&second).unwrap()
    );

    // A different spec misses the cache.
    let specs_ref = vec![PromptSpec::explain(true, vec![]); samples.len()];
    explain_batch(&second_ctx, &samples, &detector, &specs_ref).await;
    assert_eq!(backend2.calls(), samples.len());
}
