//! Deterministic in-process backends for tests, dry runs and offline replays.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use async_trait::async_trait;
use spanfix_core::markup::parse_marked;
use spanfix_core::prompting::query_analysis_line;

use crate::llm::{AttemptError, Backend, BackendReply, WireRequest};

/// What a replay backend does for a sample it has no canned reply for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fallback {
    /// Reply with [`synthesize_reply`] built from the prompt.
    Synthesize,
    /// Fail the attempt with a bad-response error.
    Fail,
}

/// Replays canned completions keyed by sample id.
pub struct MockBackend {
    replies: HashMap<String, String>,
    default_reply: Option<String>,
    fallback: Fallback,
    calls: AtomicUsize,
    scripted_errors: Mutex<Vec<AttemptError>>,
}

impl MockBackend {
    /// Every request gets `reply`.
    pub fn fixed(reply: impl Into<String>) -> Self {
        Self {
            replies: HashMap::new(),
            default_reply: Some(reply.into()),
            fallback: Fallback::Fail,
            calls: AtomicUsize::new(0),
            scripted_errors: Mutex::default(),
        }
    }

    pub fn replay(replies: HashMap<String, String>, fallback: Fallback) -> Self {
        Self {
            replies,
            default_reply: None,
            fallback,
            calls: AtomicUsize::new(0),
            scripted_errors: Mutex::default(),
        }
    }

    pub fn synthesizing() -> Self {
        Self::replay(HashMap::new(), Fallback::Synthesize)
    }

    /// Errors returned (in order) by the first attempts before replies resume.
    pub fn with_errors(self, errors: Vec<AttemptError>) -> Self {
        *self.scripted_errors.lock().unwrap_or_else(|e| e.into_inner()) = errors.into_iter().rev().collect();
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    async fn send(&self, request: &WireRequest) -> Result<BackendReply, AttemptError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(err) = self.scripted_errors.lock().unwrap_or_else(|e| e.into_inner()).pop() {
            return Err(err);
        }
        if let Some(reply) = self.replies.get(&request.sample_id).or(self.default_reply.as_ref()) {
            return Ok(BackendReply::text(reply.clone()));
        }
        match self.fallback {
            Fallback::Synthesize => Ok(BackendReply::text(synthesize_reply(&request.prompt))),
            Fallback::Fail => Err(AttemptError::BadResponse {
                status: None,
                message: format!("no canned reply for sample {}", request.sample_id),
            }),
        }
    }
}

/// Builds a well-formed completion from an explain prompt: one templated
/// explanation per tagged span, and a correction that deletes every span.
pub fn synthesize_reply(prompt: &str) -> String {
    let Some(parsed) = query_analysis_line(prompt).and_then(|line| parse_marked(line).ok()) else {
        return "Translation correction: ".to_string();
    };
    let mut lines: Vec<String> = parsed
        .spans
        .iter()
        .enumerate()
        .map(|(i, s)| {
            format!(
                "Explanation for error{}: \"{}\" is a {} error.",
                i + 1,
                s.text,
                s.severity
            )
        })
        .collect();
    let mut correction = String::new();
    let mut cursor = 0;
    let chars: Vec<char> = parsed.translation.chars().collect();
    for span in &parsed.spans {
        correction.extend(&chars[cursor..span.start]);
        cursor = span.end;
    }
    correction.extend(&chars[cursor..]);
    let correction = correction.split_whitespace().collect::<Vec<_>>().join(" ");
    lines.push(format!("Translation correction: {correction}"));
    lines.join("\n")
}
