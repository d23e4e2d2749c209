//! MQM-style penalty scoring and discretization into the five quality buckets.
//!
//! Neither the penalty weights nor the bucket cut points are fixed by any
//! standard; both are configuration with the defaults below.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ErrorSpan, QualityAssessment, QualityBucket, Severity};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoringError {
    #[error("quality value {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("bucket cut points must be strictly ascending inside (0, 1): {0:?}")]
    InvalidCuts([f64; 4]),
    #[error("penalty weights must satisfy 0 <= minor <= major <= critical and cap > 0")]
    InvalidWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketConfig {
    pub cuts: [f64; 4],
}

impl Default for BucketConfig {
    fn default() -> Self {
        Self {
            cuts: [0.40, 0.60, 0.80, 0.95],
        }
    }
}

impl BucketConfig {
    pub fn new(cuts: [f64; 4]) -> Result<Self, ScoringError> {
        let cfg = Self { cuts };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ScoringError> {
        let c = self.cuts;
        let inside = c.iter().all(|v| *v > 0.0 && *v < 1.0);
        let ascending = c.windows(2).all(|w| w[0] < w[1]);
        if inside && ascending {
            Ok(())
        } else {
            Err(ScoringError::InvalidCuts(c))
        }
    }

    /// Half-open buckets: a value equal to a cut point belongs to the upper bucket.
    pub fn discretize(&self, raw: f64) -> Result<QualityBucket, ScoringError> {
        if !(0.0..=1.0).contains(&raw) {
            return Err(ScoringError::OutOfRange(raw));
        }
        let idx = self.cuts.iter().take_while(|cut| raw >= **cut).count();
        Ok(QualityBucket::ALL[idx])
    }

    pub fn assess(&self, raw: f64) -> Result<QualityAssessment, ScoringError> {
        Ok(QualityAssessment {
            raw,
            bucket: self.discretize(raw)?,
        })
    }
}

pub fn discretize(raw: f64, cfg: &BucketConfig) -> Result<QualityBucket, ScoringError> {
    cfg.discretize(raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyWeights {
    pub minor: f64,
    pub major: f64,
    pub critical: f64,
    pub cap: f64,
}

impl Default for PenaltyWeights {
    fn default() -> Self {
        Self {
            minor: 1.0,
            major: 5.0,
            critical: 10.0,
            cap: 25.0,
        }
    }
}

impl PenaltyWeights {
    pub fn validate(&self) -> Result<(), ScoringError> {
        let ok = 0.0 <= self.minor && self.minor <= self.major && self.major <= self.critical && self.cap > 0.0;
        if ok {
            Ok(())
        } else {
            Err(ScoringError::InvalidWeights)
        }
    }

    pub fn penalty(&self, severity: Severity) -> f64 {
        match severity {
            Severity::Minor => self.minor,
            Severity::Major => self.major,
            Severity::Critical => self.critical,
        }
    }
}

/// `max(0, 1 - total_penalty / cap)`.
pub fn mqm_raw_score(spans: &[ErrorSpan], weights: &PenaltyWeights) -> f64 {
    let total: f64 = spans.iter().map(|s| weights.penalty(s.severity)).sum();
    (1.0 - total / weights.cap).max(0.0)
}
