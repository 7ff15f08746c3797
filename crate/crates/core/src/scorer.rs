//! Hierarchical scoring of an HOI feature against a class hierarchy.
//!
//! Every level of a class is scored by cosine similarity. A deeper level is
//! accepted only while its score beats the previous level by more than the
//! tolerance; the running average covers the accepted prefix and is blended
//! with the initial-description score.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::embedding::{check_dim, cosine_sim, dot, Vector};
use crate::error::{Error, Result};
use crate::hierarchy::{ClassEntry, ClassHierarchy};

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_TAU: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub lambda: f64,
    pub tau: f64,
    /// Learned text-token offset; `None` is the zero vector.
    pub text_token: Option<Vector>,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            lambda: DEFAULT_LAMBDA,
            tau: DEFAULT_TAU,
            text_token: None,
        }
    }
}

impl ScorerConfig {
    pub fn new(lambda: f64, tau: f64) -> Result<Self> {
        let cfg = ScorerConfig {
            lambda,
            tau,
            text_token: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidSetting(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidSetting(format!(
                "tau must be a finite non-negative number, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub class_id: usize,
    /// Per-level cosine scores.
    pub p: Vec<f64>,
    /// Acceptance bits between consecutive levels.
    pub u: Vec<u8>,
    /// Running average over the accepted prefix.
    pub r: f64,
    /// Initial score plus text-token offset.
    pub base: f64,
    /// Fused score.
    pub s: f64,
}

pub fn level_scores(x: &Vector, entry: &ClassEntry) -> Result<Vec<f64>> {
    entry
        .levels
        .iter()
        .map(|l| cosine_sim(&l.embedding, x))
        .collect()
}

/// `u_k = 1` iff `p[k+1] > p[k] + tau`.
pub fn evaluator_bits(p: &[f64], tau: f64) -> Vec<u8> {
    p.windows(2).map(|w| u8::from(w[1] > w[0] + tau)).collect()
}

/// Mean of `p` over the prefix kept alive by the cumulative product of `u`.
pub fn running_average(p: &[f64], u: &[u8]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::EmptyInput("no level scores".into()));
    }
    check_dim(p.len() - 1, u.len())?;
    let mut num = p[0];
    let mut den = 1.0;
    let mut alive = 1.0;
    for (pj, &uk) in p[1..].iter().zip(u) {
        alive *= f64::from(uk);
        num += pj * alive;
        den += alive;
    }
    Ok(num / den)
}

pub fn fused_score(x: &Vector, entry: &ClassEntry, cfg: &ScorerConfig) -> Result<ScoreBreakdown> {
    if entry.levels.is_empty() {
        return Err(Error::EmptyInput(format!("class `{}` has no levels", entry.name)));
    }
    let p = level_scores(x, entry)?;
    let u = evaluator_bits(&p, cfg.tau);
    let r = running_average(&p, &u)?;
    let offset = match &cfg.text_token {
        Some(t) => {
            check_dim(x.dim(), t.dim())?;
            dot(t.as_slice(), x.as_slice())
        }
        None => 0.0,
    };
    let base = p[0] + offset;
    let s = (1.0 - cfg.lambda) * base + cfg.lambda * r;
    Ok(ScoreBreakdown {
        class_id: entry.id,
        p,
        u,
        r,
        base,
        s,
    })
}

/// Scores every class; best first, ties broken by ascending class id.
pub fn classify(x: &Vector, hierarchy: &ClassHierarchy, cfg: &ScorerConfig) -> Result<Vec<ScoreBreakdown>> {
    if hierarchy.classes.is_empty() {
        return Err(Error::EmptyHierarchy);
    }
    cfg.validate()?;
    let mut out = hierarchy
        .classes
        .iter()
        .map(|c| fused_score(x, c, cfg))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| {
        b.s.partial_cmp(&a.s)
            .unwrap_or(Ordering::Equal)
            .then(a.class_id.cmp(&b.class_id))
    });
    Ok(out)
}
