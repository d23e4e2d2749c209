//! Quality scorers used for routing, tuning objectives and win rates.

use std::collections::HashMap;

use thiserror::Error;

use crate::metrics::{chrf, ChrfParams};
use crate::model::Score;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScorerError {
    #[error("scorer {0} needs a reference translation")]
    NeedsReference(String),
    #[error("scorer {scorer} has no score for hypothesis {hyp:?}")]
    Missing { scorer: String, hyp: String },
    #[error("scorer {scorer} failed: {message}")]
    Failed { scorer: String, message: String },
}

/// A deterministic quality function `(src, hyp, ref?) -> Score`.
pub trait Scorer: Send + Sync {
    fn id(&self) -> &str;
    fn requires_reference(&self) -> bool;
    fn score(&self, src: &str, hyp: &str, reference: Option<&str>) -> Result<Score, ScorerError>;
}

/// chrF against the reference, scaled to `[0, 1]`.
#[derive(Debug, Clone, Default)]
pub struct ChrfScorer {
    pub params: ChrfParams,
}

impl Scorer for ChrfScorer {
    fn id(&self) -> &str {
        "chrf"
    }

    fn requires_reference(&self) -> bool {
        true
    }

    fn score(&self, _src: &str, hyp: &str, reference: Option<&str>) -> Result<Score, ScorerError> {
        let reference = reference.ok_or_else(|| ScorerError::NeedsReference("chrf".into()))?;
        Ok(Score::new(chrf(hyp, reference, &self.params) / 100.0, "chrf"))
    }
}

/// Scores computed elsewhere (for example by a neural QE model) and looked up
/// by `(src, hyp)`.
#[derive(Debug, Clone, Default)]
pub struct TableScorer {
    id: String,
    scores: HashMap<(String, String), f64>,
}

impl TableScorer {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            scores: HashMap::new(),
        }
    }

    pub fn insert(&mut self, src: impl Into<String>, hyp: impl Into<String>, value: f64) {
        self.scores.insert((src.into(), hyp.into()), value);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

impl Scorer for TableScorer {
    fn id(&self) -> &str {
        &self.id
    }

    fn requires_reference(&self) -> bool {
        false
    }

    fn score(&self, src: &str, hyp: &str, _reference: Option<&str>) -> Result<Score, ScorerError> {
        self.scores
            .get(&(src.to_string(), hyp.to_string()))
            .map(|v| Score::new(*v, self.id.clone()))
            .ok_or_else(|| ScorerError::Missing {
                scorer: self.id.clone(),
                hyp: hyp.to_string(),
            })
    }
}
