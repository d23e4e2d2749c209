use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use spanfix_client::{AttemptError, Detector, GenParams, LlmClient, MockBackend, OpenAiBackend, QeClient, RetryPolicy};
use spanfix_core::model::{ErrorSpan, LanguagePair, Sample, Severity};
use spanfix_core::run::DetectorRef;

fn fast_retry(max_retries: u32) -> RetryPolicy {
    RetryPolicy {
        max_retries,
        base: Duration::from_millis(5),
        factor: 2.0,
        cap: Duration::from_millis(20),
        jitter: true,
    }
}

async fn serve(app: Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}")
}

fn ok_body(text: &str) -> Value {
    json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 11, "completion_tokens": 7}
    })
}

#[derive(Default)]
struct Counters {
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

#[tokio::test]
async fn retries_rate_limit_then_succeeds() {
    let counters = Arc::new(Counters::default());
    let app = Router::new()
        .route(
            "/v1/chat/completions",
            post(|State(c): State<Arc<Counters>>, Json(body): Json<Value>| async move {
                assert_eq!(body["messages"][0]["content"], "hello");
                let n = c.calls.fetch_add(1, Ordering::SeqCst);
                if n < 2 {
                    (StatusCode::TOO_MANY_REQUESTS, Json(json!({"error": "slow down"})))
                } else {
                    (StatusCode::OK, Json(ok_body("Translation correction: ok")))
                }
            }),
        )
        .with_state(counters.clone());
    let base = serve(app).await;
    let backend = OpenAiBackend::new(&format!("{base}/v1/"), Some("k".into()), Duration::from_secs(5)).unwrap();
    let client = LlmClient::new(Arc::new(backend), GenParams::default()).with_retry(fast_retry(3));
    let done = client.complete("s1", "hello").await.unwrap();
    assert_eq!(done.text, "Translation correction: ok");
    assert_eq!(done.attempts, 3);
    assert_eq!(done.prompt_tokens, Some(11));
    assert_eq!(counters.calls.load(Ordering::SeqCst), 3);

    let audit = client.audit().records();
    let outcomes: Vec<&str> = audit.iter().map(|r| r.outcome.as_str()).collect();
    assert_eq!(outcomes, ["rate_limited", "rate_limited", "ok"]);
    assert!(audit
        .iter()
        .all(|r| r.sample_id == "s1" && r.request == audit[0].request));
    assert_eq!(audit.iter().map(|r| r.attempt).collect::<Vec<_>>(), [1, 2, 3]);
}

#[tokio::test]
async fn exhausted_retries_report_sample_id() {
    let app = Router::new().route(
        "/chat/completions",
        post(|| async { (StatusCode::TOO_MANY_REQUESTS, "no") }),
    );
    let base = serve(app).await;
    let backend = OpenAiBackend::new(&base, None, Duration::from_secs(5)).unwrap();
    let client = LlmClient::new(Arc::new(backend), GenParams::default()).with_retry(fast_retry(2));
    let err = client.complete("doc7", "x").await.unwrap_err();
    assert_eq!(err.kind, AttemptError::RateLimited);
    assert_eq!(err.attempts, 3);
    assert!(err.to_string().contains("doc7"));
}

#[tokio::test]
async fn hanging_server_times_out() {
    let app = Router::new().route(
        "/chat/completions",
        post(|| async {
            tokio::time::sleep(Duration::from_secs(30)).await;
            "late"
        }),
    );
    let base = serve(app).await;
    let backend = OpenAiBackend::new(&base, None, Duration::from_millis(100)).unwrap();
    let client = LlmClient::new(Arc::new(backend), GenParams::default()).with_retry(fast_retry(1));
    let err = client.complete("s", "x").await.unwrap_err();
    assert_eq!(err.kind, AttemptError::Timeout);
    assert_eq!(err.attempts, 2);
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let calls = Arc::new(Counters::default());
    let app = Router::new()
        .route(
            "/chat/completions",
            post(|State(c): State<Arc<Counters>>| async move {
                c.calls.fetch_add(1, Ordering::SeqCst);
                (StatusCode::BAD_REQUEST, "bad prompt")
            }),
        )
        .with_state(calls.clone());
    let base = serve(app).await;
    let backend = OpenAiBackend::new(&base, None, Duration::from_secs(5)).unwrap();
    let client = LlmClient::new(Arc::new(backend), GenParams::default()).with_retry(fast_retry(3));
    let err = client.complete("s", "x").await.unwrap_err();
    assert!(matches!(err.kind, AttemptError::BadResponse { status: Some(400), .. }));
    assert_eq!(calls.calls.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn malformed_schema_is_bad_response() {
    let app = Router::new().route("/chat/completions", post(|| async { Json(json!({"choices": []})) }));
    let base = serve(app).await;
    let backend = OpenAiBackend::new(&base, None, Duration::from_secs(5)).unwrap();
    let client = LlmClient::new(Arc::new(backend), GenParams::default()).with_retry(fast_retry(3));
    let err = client.complete("s", "x").await.unwrap_err();
    assert!(matches!(err.kind, AttemptError::BadResponse { .. }));
    assert_eq!(err.attempts, 1);
}

#[tokio::test]
async fn unreachable_backend_is_unavailable() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let backend = OpenAiBackend::new(&format!("http://{addr}"), None, Duration::from_secs(2)).unwrap();
    let client = LlmClient::new(Arc::new(backend), GenParams::default()).with_retry(fast_retry(1));
    let err = client.complete("s", "x").await.unwrap_err();
    assert!(matches!(err.kind, AttemptError::Unavailable(_)), "{err}");
}

#[tokio::test]
async fn batch_bounds_concurrency_and_keeps_order() {
    let counters = Arc::new(Counters::default());
    let app = Router::new()
        .route(
            "/chat/completions",
            post(|State(c): State<Arc<Counters>>, Json(body): Json<Value>| async move {
                let now = c.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                c.max_in_flight.fetch_max(now, Ordering::SeqCst);
                let prompt = body["messages"][0]["content"].as_str().unwrap().to_string();
                let n: u64 = prompt.trim_start_matches('p').parse().unwrap();
                tokio::time::sleep(Duration::from_millis(20 + (n * 7) % 30)).await;
                c.in_flight.fetch_sub(1, Ordering::SeqCst);
                Json(ok_body(&format!("echo {prompt}")))
            }),
        )
        .with_state(counters.clone());
    let base = serve(app).await;
    let backend = OpenAiBackend::new(&base, None, Duration::from_secs(5)).unwrap();
    let client = LlmClient::new(Arc::new(backend), GenParams::default()).with_max_in_flight(3);
    let items: Vec<(String, String)> = (0..10).map(|i| (format!("s{i}"), format!("p{i}"))).collect();
    let results = client.complete_batch(&items).await;
    assert_eq!(results.len(), 10);
    for (i, r) in results.iter().enumerate() {
        assert_eq!(r.as_ref().unwrap().text, format!("echo p{i}"));
    }
    let peak = counters.max_in_flight.load(Ordering::SeqCst);
    assert!((2..=3).contains(&peak), "peak in-flight {peak}");

    assert!(client.complete_batch(&[]).await.is_empty());
}

#[tokio::test]
async fn batch_partial_failure_keeps_other_results() {
    let mut replies = std::collections::HashMap::new();
    replies.insert("a".to_string(), "A".to_string());
    replies.insert("c".to_string(), "C".to_string());
    let backend = MockBackend::replay(replies, spanfix_client::Fallback::Fail);
    let client = LlmClient::new(Arc::new(backend), GenParams::default());
    let items = [("a", "1"), ("b", "2"), ("c", "3")].map(|(a, b)| (a.to_string(), b.to_string()));
    let results = client.complete_batch(&items).await;
    assert_eq!(results[0].as_ref().unwrap().text, "A");
    let err = results[1].as_ref().unwrap_err();
    assert_eq!(err.sample_id, "b");
    assert_eq!(results[2].as_ref().unwrap().text, "C");
}

#[tokio::test]
async fn mock_scripted_errors_are_retried() {
    let backend =
        Arc::new(MockBackend::fixed("done").with_errors(vec![AttemptError::Timeout, AttemptError::RateLimited]));
    let client = LlmClient::new(backend.clone(), GenParams::default()).with_retry(fast_retry(3));
    let out = client.complete("s", "p").await.unwrap();
    assert_eq!((out.text.as_str(), out.attempts, backend.calls()), ("done", 3, 3));
}

#[tokio::test]
async fn audit_file_gets_one_line_per_attempt() {
    let dir = std::env::temp_dir().join(format!("spanfix-audit-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("audit.jsonl");
    let _ = std::fs::remove_file(&path);
    let audit = Arc::new(spanfix_client::AuditLog::to_file(&path).unwrap());
    let backend = MockBackend::fixed("ok").with_errors(vec![AttemptError::Timeout]);
    let client = LlmClient::new(Arc::new(backend), GenParams::default())
        .with_retry(fast_retry(2))
        .with_audit(audit);
    client.complete("s", "p").await.unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["outcome"], "timeout");
    assert_eq!(lines[1]["outcome"], "ok");
    assert!(lines[1]["unix_ms"].as_u64().unwrap() > 0);
    std::fs::remove_dir_all(&dir).unwrap();
}

fn qe_sample() -> Sample {
    let mut s = Sample::new(
        "q1",
        LanguagePair::new("en", "de").unwrap(),
        "The dog barks.",
        "Der Hund bellt laut.",
    );
    s.reference = Some("Der Hund bellt.".into());
    s
}

#[tokio::test]
async fn qe_detector_validates_spans() {
    let app = Router::new().route(
        "/score",
        post(|Json(body): Json<Value>| async move {
            assert_eq!(body["ref"], "Der Hund bellt.");
            Json(json!({"score": 0.7, "spans": [{"start": 15, "end": 19, "severity": "minor"}]}))
        }),
    );
    let base = serve(app).await;
    let dref = DetectorRef::QeService {
        endpoint: format!("{base}/score"),
        use_reference: true,
    };
    let detector = Detector::from_ref(&dref, Duration::from_secs(5)).unwrap();
    let out = detector.detect(&qe_sample()).await.unwrap();
    assert_eq!(
        out.spans,
        vec![ErrorSpan::over("Der Hund bellt laut.", 15, 19, Severity::Minor).unwrap()]
    );
    assert_eq!(out.score.unwrap().value, 0.7);
    assert_eq!(out.source_tag, "qe");
    assert_eq!(out.provenance, dref.summary());
}

#[tokio::test]
async fn qe_rejects_out_of_bounds_and_overlapping_spans() {
    let app = Router::new()
        .route(
            "/oob",
            post(|| async { Json(json!({"score": 0.5, "spans": [{"start": 10, "end": 99, "severity": "major"}]})) }),
        )
        .route(
            "/overlap",
            post(|| async {
                Json(json!({"score": 0.5, "spans": [
                    {"start": 0, "end": 8, "severity": "major"},
                    {"start": 4, "end": 10, "severity": "minor"}
                ]}))
            }),
        )
        .route(
            "/score-range",
            post(|| async { Json(json!({"score": 1.5, "spans": []})) }),
        )
        .route("/down", post(|| async { StatusCode::SERVICE_UNAVAILABLE }));
    let base = serve(app).await;
    let sample = qe_sample();
    for path in ["oob", "overlap", "score-range"] {
        let client = QeClient::new(&format!("{base}/{path}"), Duration::from_secs(5)).unwrap();
        let err = client
            .query("q1", &sample.source, &sample.translation, None)
            .await
            .unwrap_err();
        assert!(
            matches!(err, spanfix_client::DetectError::BadServiceResponse { .. }),
            "{path}: {err}"
        );
    }
    let client = QeClient::new(&format!("{base}/down"), Duration::from_secs(5)).unwrap();
    let err = client
        .query("q1", &sample.source, &sample.translation, None)
        .await
        .unwrap_err();
    assert!(matches!(err, spanfix_client::DetectError::ServiceUnavailable { .. }));
}

#[tokio::test]
async fn human_detector_passes_spans_through() {
    let mut sample = qe_sample();
    sample.spans = vec![ErrorSpan::over(&sample.translation, 4, 8, Severity::Major).unwrap()];
    let detector = Detector::from_ref(
        &DetectorRef::HumanFile { path: "d.jsonl".into() },
        Duration::from_secs(1),
    )
    .unwrap();
    let out = detector.detect(&sample).await.unwrap();
    assert_eq!(out.spans, sample.spans);
    assert!(out.score.is_none());
    assert_eq!(out.source_tag, "human");

    let detector = Detector::from_ref(
        &DetectorRef::QeService {
            endpoint: "http://127.0.0.1:9".into(),
            use_reference: true,
        },
        Duration::from_secs(1),
    )
    .unwrap();
    sample.reference = None;
    assert!(matches!(
        detector.detect(&sample).await,
        Err(spanfix_client::DetectError::MissingReference { .. })
    ));
}
