//! Hybrid original-vs-correction selection and its threshold tuning.
//!
//! With metric `m` and threshold `tau`:
//!
//! ```text
//! y = original    if m(original) > tau
//!   = correction  elif m(correction) > m(original)
//!   = original    otherwise
//! ```
//!
//! The correction is only requested when the first branch does not fire.

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Score;
use crate::scorer::{Scorer, ScorerError};

#[derive(Debug, Error)]
pub enum RouterError {
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error("need at least 2 samples to split, got {0}")]
    TooFewSamples(usize),
    #[error("dev fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("development set is empty")]
    EmptyDev,
    #[error("no routing decisions")]
    NoDecisions,
    #[error("writing decisions: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Chosen {
    Original,
    Correction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    KeepHighQuality,
    CorrectionWins,
    FallbackOriginal,
}

impl Chosen {
    pub fn as_str(self) -> &'static str {
        match self {
            Chosen::Original => "original",
            Chosen::Correction => "correction",
        }
    }
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::KeepHighQuality => "keep_high_quality",
            Branch::CorrectionWins => "correction_wins",
            Branch::FallbackOriginal => "fallback_original",
        }
    }
}

impl fmt::Display for Chosen {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub chosen: Chosen,
    pub m_original: Score,
    /// Absent exactly when the first branch fired.
    pub m_correction: Option<Score>,
    pub tau: f64,
    pub branch: Branch,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingOutcome {
    pub decision: RoutingDecision,
    pub translation: String,
}

/// Applies the hybrid rule. `correction` is called at most once and only when
/// `m(original) <= tau`; if it fails the original is kept with a diagnostic.
pub fn route<F, E>(
    src: &str,
    original: &str,
    reference: Option<&str>,
    correction: F,
    m: &dyn Scorer,
    tau: f64,
) -> Result<RoutingOutcome, RouterError>
where
    F: FnOnce() -> Result<String, E>,
    E: fmt::Display,
{
    if m.requires_reference() && reference.is_none() {
        return Err(ScorerError::NeedsReference(m.id().to_string()).into());
    }
    let m_original = m.score(src, original, reference)?;
    if m_original.value > tau {
        return Ok(RoutingOutcome {
            decision: RoutingDecision {
                chosen: Chosen::Original,
                m_original,
                m_correction: None,
                tau,
                branch: Branch::KeepHighQuality,
                diagnostic: None,
            },
            translation: original.to_string(),
        });
    }
    let corrected = match correction() {
        Ok(text) => text,
        Err(e) => {
            return Ok(RoutingOutcome {
                decision: RoutingDecision {
                    chosen: Chosen::Original,
                    m_original,
                    m_correction: None,
                    tau,
                    branch: Branch::FallbackOriginal,
                    diagnostic: Some(format!("correction unavailable: {e}")),
                },
                translation: original.to_string(),
            })
        }
    };
    let m_correction = m.score(src, &corrected, reference)?;
    let (chosen, branch, translation) = if m_correction.value > m_original.value {
        (Chosen::Correction, Branch::CorrectionWins, corrected)
    } else {
        (Chosen::Original, Branch::FallbackOriginal, original.to_string())
    };
    Ok(RoutingOutcome {
        decision: RoutingDecision {
            chosen,
            m_original,
            m_correction: Some(m_correction),
            tau,
            branch,
            diagnostic: None,
        },
        translation,
    })
}

/// Seeded shuffle, then the first `round(fraction * n)` items form the dev
/// split. Both halves keep the input order.
pub fn split_dev<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), RouterError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(RouterError::BadFraction(fraction));
    }
    if items.len() < 2 {
        return Err(RouterError::TooFewSamples(items.len()));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_dev = (fraction * items.len() as f64).round() as usize;
    let mut in_dev = vec![false; items.len()];
    for &i in &order[..n_dev] {
        in_dev[i] = true;
    }
    let mut dev = Vec::with_capacity(n_dev);
    let mut eval = Vec::with_capacity(items.len() - n_dev);
    for (item, dev_member) in items.iter().zip(in_dev) {
        if dev_member {
            dev.push(item.clone());
        } else {
            eval.push(item.clone());
        }
    }
    Ok((dev, eval))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DevItem {
    pub source: String,
    pub original: String,
    pub correction: String,
    pub reference: Option<String>,
}

/// Per-item scores the tuner needs; computed once up front.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItemScores {
    pub m_original: f64,
    pub m_correction: f64,
    pub objective_original: f64,
    pub objective_correction: f64,
}

impl ItemScores {
    pub fn routed_objective(&self, tau: f64) -> f64 {
        if self.m_original > tau || self.m_correction <= self.m_original {
            self.objective_original
        } else {
            self.objective_correction
        }
    }

    pub fn keeps_original(&self, tau: f64) -> bool {
        self.m_original > tau || self.m_correction <= self.m_original
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuneResult {
    pub tau: f64,
    pub objective_mean: f64,
}

pub fn score_dev(dev: &[DevItem], m: &dyn Scorer, objective: &dyn Scorer) -> Result<Vec<ItemScores>, RouterError> {
    dev.iter()
        .map(|item| {
            let reference = item.reference.as_deref();
            Ok(ItemScores {
                m_original: m.score(&item.source, &item.original, reference)?.value,
                m_correction: m.score(&item.source, &item.correction, reference)?.value,
                objective_original: objective.score(&item.source, &item.original, reference)?.value,
                objective_correction: objective.score(&item.source, &item.correction, reference)?.value,
            })
        })
        .collect()
}

/// Mean objective over `scores` when routing with `tau`.
pub fn mean_routed_objective(scores: &[ItemScores], tau: f64) -> f64 {
    scores.iter().map(|s| s.routed_objective(tau)).sum::<f64>() / scores.len() as f64
}

/// Exhaustive search over `{-inf} ∪ {observed m(original)}`.
///
/// The objective is piecewise constant in `tau` between observed values, so
/// this grid is exact. Ties go to the smallest `tau`.
pub fn tune_on_scores(scores: &[ItemScores]) -> Result<TuneResult, RouterError> {
    if scores.is_empty() {
        return Err(RouterError::EmptyDev);
    }
    let mut candidates: Vec<f64> = scores.iter().map(|s| s.m_original).collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates.insert(0, f64::NEG_INFINITY);
    let mut best = TuneResult {
        tau: f64::NEG_INFINITY,
        objective_mean: f64::NEG_INFINITY,
    };
    for tau in candidates {
        let mean = mean_routed_objective(scores, tau);
        if mean > best.objective_mean {
            best = TuneResult {
                tau,
                objective_mean: mean,
            };
        }
    }
    Ok(best)
}

pub fn tune_threshold(dev: &[DevItem], m: &dyn Scorer, objective: &dyn Scorer) -> Result<TuneResult, RouterError> {
    if dev.is_empty() {
        return Err(RouterError::EmptyDev);
    }
    tune_on_scores(&score_dev(dev, m, objective)?)
}

pub fn kept_fraction(decisions: &[RoutingDecision]) -> Result<f64, RouterError> {
    if decisions.is_empty() {
        return Err(RouterError::NoDecisions);
    }
    let kept = decisions.iter().filter(|d| d.chosen == Chosen::Original).count();
    Ok(kept as f64 / decisions.len() as f64)
}

/// Writes `id,m_original,m_correction,tau,branch,chosen` rows.
pub fn write_decisions_csv<W: Write>(out: W, rows: &[(String, RoutingDecision)]) -> Result<(), RouterError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "m_original", "m_correction", "tau", "branch", "chosen"])?;
    for (id, d) in rows {
        w.write_record([
            id.clone(),
            d.m_original.value.to_string(),
            d.m_correction.as_ref().map(|s| s.value.to_string()).unwrap_or_default(),
            d.tau.to_string(),
            d.branch.to_string(),
            d.chosen.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
