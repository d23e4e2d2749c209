//! Chat-completion client with retries, an attempt audit log and bounded
//! batch concurrency.
//!
//! The wire protocol is the OpenAI-compatible `POST {base_url}/chat/completions`
//! with the whole prompt as a single user message.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub stop: Vec<String>,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            model_id: "mock".into(),
            temperature: 0.0,
            max_tokens: 1024,
            stop: Vec::new(),
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base: Duration,
    pub factor: f64,
    pub cap: Duration,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base: Duration::from_secs(1),
            factor: 2.0,
            cap: Duration::from_secs(30),
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based). With jitter the delay is
    /// drawn uniformly from the upper half of the exponential value.
    pub fn delay(&self, retry: u32) -> Duration {
        let exp = self.base.as_secs_f64() * self.factor.powi(retry as i32);
        let capped = exp.min(self.cap.as_secs_f64());
        let scaled = if self.jitter {
            capped * rand::thread_rng().gen_range(0.5..=1.0)
        } else {
            capped
        };
        Duration::from_secs_f64(scaled)
    }
}

/// A serialized request. `body` is produced once so every retry sends
/// identical bytes.
#[derive(Debug, Clone)]
pub struct WireRequest {
    pub sample_id: String,
    pub prompt: String,
    pub body: Arc<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendReply {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

impl BackendReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            prompt_tokens: None,
            completion_tokens: None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttemptError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited")]
    RateLimited,
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("bad response{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    BadResponse { status: Option<u16>, message: String },
}

impl AttemptError {
    pub fn retryable(&self) -> bool {
        !matches!(self, AttemptError::BadResponse { .. })
    }

    fn label(&self) -> &'static str {
        match self {
            AttemptError::Timeout => "timeout",
            AttemptError::RateLimited => "rate_limited",
            AttemptError::Unavailable(_) => "unavailable",
            AttemptError::BadResponse { .. } => "bad_response",
        }
    }
}

/// A completion failure, tagged with the sample it belongs to.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("sample {sample_id}: {kind} after {attempts} attempt(s)")]
pub struct LlmError {
    pub sample_id: String,
    pub attempts: u32,
    pub kind: AttemptError,
}

#[async_trait]
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    async fn send(&self, request: &WireRequest) -> Result<BackendReply, AttemptError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub unix_ms: u128,
    pub sample_id: String,
    pub attempt: u32,
    pub backend: String,
    pub model: String,
    pub outcome: String,
    pub latency_ms: u128,
    pub request: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
}

/// Attempt log: kept in memory and, optionally, appended to a JSONL file.
#[derive(Default)]
pub struct AuditLog {
    records: Mutex<Vec<AuditRecord>>,
    file: Option<Mutex<File>>,
}

impl fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AuditLog")
            .field("to_file", &self.file.is_some())
            .finish()
    }
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            records: Mutex::default(),
            file: Some(Mutex::new(file)),
        })
    }

    pub fn record(&self, record: AuditRecord) {
        if let Some(file) = &self.file {
            if let Ok(line) = serde_json::to_string(&record) {
                let mut f = file.lock().unwrap_or_else(|e| e.into_inner());
                if let Err(e) = writeln!(f, "{line}") {
                    tracing::warn!("audit log write failed: {e}");
                }
            }
        }
        self.records.lock().unwrap_or_else(|e| e.into_inner()).push(record);
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.records.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

pub fn chat_body(prompt: &str, params: &GenParams) -> Vec<u8> {
    let mut body = json!({
        "model": params.model_id,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": params.temperature,
        "max_tokens": params.max_tokens,
    });
    if !params.stop.is_empty() {
        body["stop"] = json!(params.stop);
    }
    serde_json::to_vec(&body).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

pub struct LlmClient {
    backend: Arc<dyn Backend>,
    params: GenParams,
    retry: RetryPolicy,
    max_in_flight: usize,
    audit: Arc<AuditLog>,
}

impl LlmClient {
    pub fn new(backend: Arc<dyn Backend>, params: GenParams) -> Self {
        Self {
            backend,
            params,
            retry: RetryPolicy::default(),
            max_in_flight: 4,
            audit: Arc::new(AuditLog::in_memory()),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn with_audit(mut self, audit: Arc<AuditLog>) -> Self {
        self.audit = audit;
        self
    }

    pub fn params(&self) -> &GenParams {
        &self.params
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub async fn complete(&self, sample_id: &str, prompt: &str) -> Result<Completion, LlmError> {
        let request = WireRequest {
            sample_id: sample_id.to_string(),
            prompt: prompt.to_string(),
            body: Arc::new(chat_body(prompt, &self.params)),
        };
        let request_text = String::from_utf8_lossy(&request.body).into_owned();
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let started = Instant::now();
            let result = self.backend.send(&request).await;
            let unix_ms = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0);
            let (outcome, response, prompt_tokens, completion_tokens) = match &result {
                Ok(reply) => (
                    "ok",
                    Some(reply.text.clone()),
                    reply.prompt_tokens,
                    reply.completion_tokens,
                ),
                Err(e) => (e.label(), Some(e.to_string()), None, None),
            };
            self.audit.record(AuditRecord {
                unix_ms,
                sample_id: sample_id.to_string(),
                attempt,
                backend: self.backend.name().to_string(),
                model: self.params.model_id.clone(),
                outcome: outcome.to_string(),
                latency_ms: started.elapsed().as_millis(),
                request: request_text.clone(),
                response,
                prompt_tokens,
                completion_tokens,
            });
            match result {
                Ok(reply) => {
                    return Ok(Completion {
                        text: reply.text,
                        attempts: attempt,
                        prompt_tokens: reply.prompt_tokens,
                        completion_tokens: reply.completion_tokens,
                    })
                }
                Err(kind) if kind.retryable() && attempt <= self.retry.max_retries => {
                    let delay = self.retry.delay(attempt - 1);
                    tracing::debug!(sample_id, attempt, ?delay, "retrying after {kind}");
                    tokio::time::sleep(delay).await;
                }
                Err(kind) => {
                    return Err(LlmError {
                        sample_id: sample_id.to_string(),
                        attempts: attempt,
                        kind,
                    })
                }
            }
        }
    }

    /// Completes `(sample_id, prompt)` pairs with at most `max_in_flight`
    /// outstanding requests. Results are aligned with the input.
    pub async fn complete_batch(&self, items: &[(String, String)]) -> Vec<Result<Completion, LlmError>> {
        stream::iter(items.iter().map(|(id, prompt)| self.complete(id, prompt)))
            .buffered(self.max_in_flight)
            .collect()
            .await
    }
}

/// OpenAI-compatible HTTP backend.
pub struct OpenAiBackend {
    http: reqwest::Client,
    url: String,
    api_key: Option<String>,
}

impl OpenAiBackend {
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration) -> Result<Self, reqwest::Error> {
        let http = reqwest::Client::builder().timeout(timeout).build()?;
        Ok(Self {
            http,
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
        })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

fn classify(e: &reqwest::Error) -> AttemptError {
    if e.is_timeout() {
        AttemptError::Timeout
    } else if e.is_connect() {
        AttemptError::Unavailable(e.to_string())
    } else {
        AttemptError::BadResponse {
            status: e.status().map(|s| s.as_u16()),
            message: e.to_string(),
        }
    }
}

#[async_trait]
impl Backend for OpenAiBackend {
    fn name(&self) -> &str {
        "openai-compatible"
    }

    async fn send(&self, request: &WireRequest) -> Result<BackendReply, AttemptError> {
        let mut builder = self
            .http
            .post(&self.url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(request.body.as_ref().clone());
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().await.map_err(|e| classify(&e))?;
        let status = response.status();
        let body = response.text().await.map_err(|e| classify(&e))?;
        if status.as_u16() == 429 {
            return Err(AttemptError::RateLimited);
        }
        if status.is_server_error() {
            return Err(AttemptError::Unavailable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(AttemptError::BadResponse {
                status: Some(status.as_u16()),
                message: body.chars().take(500).collect(),
            });
        }
        let parsed: ChatResponse = serde_json::from_str(&body).map_err(|e| AttemptError::BadResponse {
            status: Some(status.as_u16()),
            message: format!("unexpected response schema: {e}"),
        })?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| AttemptError::BadResponse {
                status: Some(status.as_u16()),
                message: "response has no message content".into(),
            })?;
        Ok(BackendReply {
            text,
            prompt_tokens: parsed.usage.as_ref().and_then(|u| u.prompt_tokens),
            completion_tokens: parsed.usage.as_ref().and_then(|u| u.completion_tokens),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy {
            jitter: false,
            ..RetryPolicy::default()
        };
        assert_eq!(p.delay(0), Duration::from_secs(1));
        assert_eq!(p.delay(1), Duration::from_secs(2));
        assert_eq!(p.delay(4), Duration::from_secs(16));
        assert_eq!(p.delay(5), Duration::from_secs(30));
        assert_eq!(p.delay(12), Duration::from_secs(30));
        let j = RetryPolicy::default();
        for retry in 0..6 {
            let d = j.delay(retry);
            assert!(d <= p.delay(retry) && d >= p.delay(retry) / 2);
        }
    }

    #[test]
    fn default_temperature_is_zero() {
        assert_eq!(GenParams::default().temperature, 0.0);
        let bad = GenParams {
            temperature: -0.1,
            ..GenParams::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn body_is_single_user_message() {
        let body: serde_json::Value = serde_json::from_slice(&chat_body("hi", &GenParams::default())).unwrap();
        assert_eq!(body["messages"].as_array().unwrap().len(), 1);
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"], "hi");
        assert_eq!(body["temperature"], 0.0);
        assert!(body.get("stop").is_none());
    }
}
