//! Outcome variable, total and indirect effects, restoration sweeps,
//! aggregation into trace grids and the accompanying statistics.

mod aggregate;
mod stats;
mod trace;

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::SiteKind;

pub use aggregate::{aggregate_grid, Aggregation, TraceGrid};
pub use stats::{cohens_d, mean, sample_variance, summarize, welch_t_test, StatsSummary, TTest, TTestResult};
pub use trace::{
    capture_zero_states, estimate_noise_sigma, exp1_trace, exp2_trace, joint_effect, noise_span, pse_trace,
    pse_trace_with_states, total_effect_for, trace, EffectSample, NoiseSpec, NoiseTarget, Setup, TraceOptions,
};

#[derive(Debug, Error)]
pub enum MediationError {
    #[error("invalid outcome: {0}")]
    Outcome(String),
    #[error("instance error: {0}")]
    Instance(String),
    #[error("degenerate statistics: {0}")]
    Degenerate(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
}

pub type Result<T, E = MediationError> = std::result::Result<T, E>;

/// `Y = log P(cf) − log P(true)`.
pub fn outcome_y(logp_cf: f64, logp_true: f64) -> f64 {
    logp_cf - logp_true
}

pub fn total_effect(y1: f64, y0: f64) -> f64 {
    y1 - y0
}

pub fn indirect_effect(y_restored: f64, y0: f64) -> f64 {
    y_restored - y0
}

/// Layers `[c − ⌊w/2⌋, c + ⌈w/2⌉ − 1]` clipped to the model. `width` 0 is
/// treated as 1.
pub fn layer_window(center: usize, width: usize, n_layers: usize) -> RangeInclusive<usize> {
    let w = width.max(1);
    let lo = center.saturating_sub(w / 2);
    let hi = (center + w.div_ceil(2) - 1).min(n_layers.saturating_sub(1));
    lo..=hi
}

/// Default restoration window: six layers for mlp/attn, single sites otherwise.
pub fn default_window(kind: SiteKind) -> usize {
    match kind {
        SiteKind::MlpOut | SiteKind::AttnOut => 6,
        SiteKind::Hidden | SiteKind::Embedding => 1,
    }
}

/// True and counterfactual answer tokens scored by `Y`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutcomeSpec {
    pub true_answer: Vec<usize>,
    pub counterfactual: Vec<usize>,
}

impl OutcomeSpec {
    pub fn new(true_answer: Vec<usize>, counterfactual: Vec<usize>) -> Result<Self> {
        if true_answer.is_empty() || counterfactual.is_empty() {
            return Err(MediationError::Outcome("empty answer".into()));
        }
        if true_answer == counterfactual {
            return Err(MediationError::Outcome(
                "true and counterfactual answers are identical".into(),
            ));
        }
        Ok(Self {
            true_answer,
            counterfactual,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "exp1")]
    Exp1,
    #[serde(rename = "exp2-subject")]
    Exp2Subject,
    #[serde(rename = "exp2-relation")]
    Exp2Relation,
    #[serde(rename = "pse-mlp")]
    PseMlp,
    #[serde(rename = "pse-attn")]
    PseAttn,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Self::Exp1,
        Self::Exp2Subject,
        Self::Exp2Relation,
        Self::PseMlp,
        Self::PseAttn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Exp1 => "exp1",
            Self::Exp2Subject => "exp2-subject",
            Self::Exp2Relation => "exp2-relation",
            Self::PseMlp => "pse-mlp",
            Self::PseAttn => "pse-attn",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown condition {s:?}"))
    }
}
