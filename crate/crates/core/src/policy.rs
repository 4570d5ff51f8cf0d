//! Confidence measures, threshold schedules and the exit rule.
//!
//! The decaying schedule is `clamp(0.9 * lambda + 0.1 * exp(-tau * t / N), 0, 1)`:
//! it starts at `0.9 * lambda + 0.1` for the first generated token and relaxes
//! toward `0.9 * lambda` as `t` approaches the generation horizon `N`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, EngineError, Result};
use crate::model::ModelConfig;

/// Default pruning exit.
pub const DEFAULT_PRUNE_EXIT: usize = 2;
/// Pruned vocabulary size for short-answer generation.
pub const DEFAULT_PRUNE_SIZE: usize = 64;
/// Pruned vocabulary size for long-form generation.
pub const LONG_FORM_PRUNE_SIZE: usize = 512;
pub const DEFAULT_TAU: f32 = 4.0;
pub const DEFAULT_LAMBDA: f32 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMeasure {
    /// Largest class probability.
    MaxSoftmax,
    /// Gap between the two largest class probabilities.
    Top2Diff,
}

impl std::str::FromStr for ConfidenceMeasure {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max_softmax" | "max-softmax" | "softmax" => Ok(Self::MaxSoftmax),
            "top2_diff" | "top2-diff" | "top-2-diff" => Ok(Self::Top2Diff),
            other => Err(invalid(format!("unknown confidence measure `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdSchedule {
    Static { lambda: f32 },
    Decaying { lambda: f32, tau: f32 },
}

impl ThresholdSchedule {
    pub fn lambda(&self) -> f32 {
        match *self {
            Self::Static { lambda } | Self::Decaying { lambda, .. } => lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambda = self.lambda();
        if !(0.0..=1.0).contains(&lambda) {
            return Err(invalid(format!("threshold {lambda} outside [0, 1]")));
        }
        if let Self::Decaying { tau, .. } = *self {
            if !(tau >= 0.0 && tau.is_finite()) {
                return Err(invalid(format!("decay rate tau = {tau} must be >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitPolicy {
    pub measure: ConfidenceMeasure,
    pub schedule: ThresholdSchedule,
    /// Layer (1-based) whose logits select the pruned vocabulary. `None`
    /// disables pruning.
    pub prune_exit: Option<usize>,
    pub prune_size: usize,
    /// Generation horizon `N` used by the decaying schedule.
    pub max_new_tokens: usize,
}

impl Default for ExitPolicy {
    fn default() -> Self {
        Self {
            measure: ConfidenceMeasure::Top2Diff,
            schedule: ThresholdSchedule::Static {
                lambda: DEFAULT_LAMBDA,
            },
            prune_exit: Some(DEFAULT_PRUNE_EXIT),
            prune_size: DEFAULT_PRUNE_SIZE,
            max_new_tokens: 32,
        }
    }
}

impl ExitPolicy {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        self.schedule.validate()?;
        if self.max_new_tokens == 0 {
            return Err(invalid("max_new_tokens must be >= 1"));
        }
        if let Some(p) = self.prune_exit {
            if p == 0 || p >= config.n_layers {
                return Err(invalid(format!(
                    "prune exit {p} must satisfy 1 <= p < L = {}",
                    config.n_layers
                )));
            }
            if self.prune_size == 0 || self.prune_size > config.d_vocab {
                return Err(invalid(format!(
                    "prune size {} must satisfy 1 <= K <= d_vocab = {}",
                    self.prune_size, config.d_vocab
                )));
            }
        }
        Ok(())
    }

    pub fn threshold_at(&self, t: usize) -> Result<f32> {
        threshold_at(&self.schedule, t, self.max_new_tokens)
    }
}

/// Confidence of a probability vector under `measure`.
pub fn confidence(probs: &[f32], measure: ConfidenceMeasure) -> Result<f32> {
    if probs.is_empty() {
        return Err(invalid("confidence of an empty distribution"));
    }
    let sum: f64 = probs.iter().map(|&p| p as f64).sum();
    if (sum - 1.0).abs() > 1e-5 || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(invalid(format!("probabilities are not on the simplex (sum {sum})")));
    }
    let (first, second) = top_two(probs);
    let c = match measure {
        ConfidenceMeasure::MaxSoftmax => first,
        ConfidenceMeasure::Top2Diff => {
            let second = second.ok_or_else(|| invalid("top-2 difference needs at least two probabilities"))?;
            first - second
        }
    };
    Ok(c.clamp(0.0, 1.0))
}

/// Confidence of the softmax of `logits` under `measure`. The measure is
/// formed from the unnormalized exponentials and divided by the normalizer in
/// `f64`, so dropping entries from `logits` (keeping the top two) can only
/// raise the result, even after rounding.
pub fn confidence_from_logits(logits: &[f32], measure: ConfidenceMeasure) -> Result<f32> {
    if logits.is_empty() {
        return Err(invalid("confidence of an empty distribution"));
    }
    let (max, second) = top_two(logits);
    if !max.is_finite() || logits.iter().any(|l| !l.is_finite()) {
        return Err(invalid("logits are not finite"));
    }
    let sum: f64 = logits.iter().map(|&l| (l - max).exp() as f64).sum();
    let gap = match measure {
        ConfidenceMeasure::MaxSoftmax => 1.0,
        ConfidenceMeasure::Top2Diff => {
            let second = second.ok_or_else(|| invalid("top-2 difference needs at least two probabilities"))?;
            1.0 - (second - max).exp() as f64
        }
    };
    Ok(((gap / sum) as f32).clamp(0.0, 1.0))
}

fn top_two(values: &[f32]) -> (f32, Option<f32>) {
    let mut first = f32::NEG_INFINITY;
    let mut second = f32::NEG_INFINITY;
    for &v in values {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    (first, (values.len() > 1).then_some(second))
}

pub fn threshold_at(schedule: &ThresholdSchedule, t: usize, horizon: usize) -> Result<f32> {
    if t >= horizon {
        return Err(invalid(format!("token index {t} outside horizon {horizon}")));
    }
    Ok(match *schedule {
        ThresholdSchedule::Static { lambda } => lambda,
        ThresholdSchedule::Decaying { lambda, tau } => {
            let decay = (-(tau as f64) * t as f64 / horizon as f64).exp();
            (0.9 * lambda as f64 + 0.1 * decay).clamp(0.0, 1.0) as f32
        }
    })
}

/// Inclusive comparison: a confidence equal to the threshold exits.
#[inline]
pub fn should_exit(confidence: f32, threshold: f32) -> bool {
    confidence >= threshold
}
