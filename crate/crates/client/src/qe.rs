//! Client for an external quality-estimation service and the span detectors
//! built on it.
//!
//! Wire format: `POST endpoint` with `{"src", "mt", "ref"?}`, answered by
//! `{"score": f64 in [0,1], "spans": [{"start", "end", "severity"}]}`.

use std::time::Duration;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use spanfix_core::model::{validate_spans, Sample, Score};
use spanfix_core::records::SpanRecord;
use spanfix_core::run::{DetectionResult, DetectorRef};
use thiserror::Error;

pub const QE_METRIC_ID: &str = "qe";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DetectError {
    #[error("sample {sample_id}: QE service unavailable: {message}")]
    ServiceUnavailable { sample_id: String, message: String },
    #[error("sample {sample_id}: bad QE service response: {message}")]
    BadServiceResponse { sample_id: String, message: String },
    #[error("sample {sample_id}: reference required by detector but missing")]
    MissingReference { sample_id: String },
    #[error("sample {sample_id}: invalid spans: {}", violations.join("; "))]
    InvalidSpans { sample_id: String, violations: Vec<String> },
}

#[derive(Serialize)]
struct QeRequest<'a> {
    src: &'a str,
    mt: &'a str,
    #[serde(rename = "ref", skip_serializing_if = "Option::is_none")]
    reference: Option<&'a str>,
}

#[derive(Deserialize)]
struct QeResponse {
    score: f64,
    #[serde(default)]
    spans: Vec<SpanRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QeOutput {
    pub score: f64,
    pub spans: Vec<spanfix_core::ErrorSpan>,
}

#[derive(Debug, Clone)]
pub struct QeClient {
    http: reqwest::Client,
    endpoint: String,
}

impl QeClient {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self, reqwest::Error> {
        Ok(Self {
            http: reqwest::Client::builder().timeout(timeout).build()?,
            endpoint: endpoint.to_string(),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Queries the service and re-validates the returned spans against `mt`.
    pub async fn query(
        &self,
        sample_id: &str,
        src: &str,
        mt: &str,
        reference: Option<&str>,
    ) -> Result<QeOutput, DetectError> {
        let unavailable = |message: String| DetectError::ServiceUnavailable {
            sample_id: sample_id.to_string(),
            message,
        };
        let bad = |message: String| DetectError::BadServiceResponse {
            sample_id: sample_id.to_string(),
            message,
        };
        let response = self
            .http
            .post(&self.endpoint)
            .json(&QeRequest { src, mt, reference })
            .send()
            .await
            .map_err(|e| unavailable(e.to_string()))?;
        let status = response.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(unavailable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(bad(format!("HTTP {status}")));
        }
        let body = response.text().await.map_err(|e| unavailable(e.to_string()))?;
        let parsed: QeResponse = serde_json::from_str(&body).map_err(|e| bad(e.to_string()))?;
        if !(0.0..=1.0).contains(&parsed.score) {
            return Err(bad(format!("score {} outside [0, 1]", parsed.score)));
        }
        let mut spans = Vec::with_capacity(parsed.spans.len());
        for (i, record) in parsed.spans.iter().enumerate() {
            let span = record.resolve(mt).ok_or_else(|| {
                bad(format!(
                    "span {i}: offsets {}..{} invalid for translation",
                    record.start, record.end
                ))
            })?;
            spans.push(span);
        }
        let violations = validate_spans(mt, &spans);
        if !violations.is_empty() {
            return Err(bad(violations.join("; ")));
        }
        Ok(QeOutput {
            score: parsed.score,
            spans,
        })
    }
}

/// A span detector resolved from a [`DetectorRef`].
#[derive(Debug, Clone)]
pub enum Detector {
    Human { path: String },
    Qe { client: QeClient, use_reference: bool },
}

impl Detector {
    pub fn from_ref(detector: &DetectorRef, timeout: Duration) -> Result<Self, reqwest::Error> {
        Ok(match detector {
            DetectorRef::HumanFile { path } => Detector::Human { path: path.clone() },
            DetectorRef::QeService {
                endpoint,
                use_reference,
            } => Detector::Qe {
                client: QeClient::new(endpoint, timeout)?,
                use_reference: *use_reference,
            },
        })
    }

    pub fn reference(&self) -> DetectorRef {
        match self {
            Detector::Human { path } => DetectorRef::HumanFile { path: path.clone() },
            Detector::Qe { client, use_reference } => DetectorRef::QeService {
                endpoint: client.endpoint().to_string(),
                use_reference: *use_reference,
            },
        }
    }

    pub async fn detect(&self, sample: &Sample) -> Result<DetectionResult, DetectError> {
        let reference = self.reference();
        match self {
            Detector::Human { .. } => {
                let violations = validate_spans(&sample.translation, &sample.spans);
                if !violations.is_empty() {
                    return Err(DetectError::InvalidSpans {
                        sample_id: sample.id.clone(),
                        violations,
                    });
                }
                Ok(DetectionResult {
                    spans: sample.spans.clone(),
                    score: None,
                    provenance: reference.summary(),
                    source_tag: reference.source_tag().to_string(),
                })
            }
            Detector::Qe { client, use_reference } => {
                let ref_text = if *use_reference {
                    Some(
                        sample
                            .reference
                            .as_deref()
                            .ok_or_else(|| DetectError::MissingReference {
                                sample_id: sample.id.clone(),
                            })?,
                    )
                } else {
                    None
                };
                let out = client
                    .query(&sample.id, &sample.source, &sample.translation, ref_text)
                    .await?;
                Ok(DetectionResult {
                    spans: out.spans,
                    score: Some(Score::new(out.score, QE_METRIC_ID)),
                    provenance: reference.summary(),
                    source_tag: reference.source_tag().to_string(),
                })
            }
        }
    }

    /// Detects over `samples` with bounded concurrency, preserving order.
    pub async fn detect_batch(
        &self,
        samples: &[Sample],
        max_in_flight: usize,
    ) -> Vec<Result<DetectionResult, DetectError>> {
        stream::iter(samples.iter().map(|s| self.detect(s)))
            .buffered(max_in_flight.max(1))
            .collect()
            .await
    }
}
