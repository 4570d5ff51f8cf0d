//! FLOPs accounting.
//!
//! Counting convention, applied identically to both decoding modes:
//!
//! | operation                        | FLOPs                      |
//! |----------------------------------|----------------------------|
//! | dot product of length `n`        | `2n`                       |
//! | `m x n` projection               | `2mn`                      |
//! | softmax over `n`                 | `5n`                       |
//! | confidence measure over `n`      | `n`                        |
//! | top-K selection over `n`         | `n`                        |
//! | layer norm over `n`              | `5n`                       |
//! | GELU per element                 | `8`                        |
//! | residual add over `n`            | `n`                        |
//!
//! Gathering the pruned rows is a copy and costs nothing. Prompt ingestion is
//! not recorded; the ledger covers generated tokens only.

use std::fmt;
use std::str::FromStr;

use serde::ser::SerializeMap;
use serde::{Serialize, Serializer};

use crate::decoder::DecodeMode;
use crate::error::{invalid, EngineError, Result};
use crate::policy::ExitPolicy;

pub const SOFTMAX_PER_ELEMENT: u64 = 5;
pub const MEASURE_PER_ELEMENT: u64 = 1;
pub const TOPK_PER_ELEMENT: u64 = 1;
pub const LAYER_NORM_PER_ELEMENT: u64 = 5;
pub const GELU_PER_ELEMENT: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Attention,
    Ffn,
    Layernorm,
    ConfidenceProjection,
    ConfidenceSoftmax,
    ConfidenceMeasure,
    TopkSelect,
    StatePropagation,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Attention,
        Category::Ffn,
        Category::Layernorm,
        Category::ConfidenceProjection,
        Category::ConfidenceSoftmax,
        Category::ConfidenceMeasure,
        Category::TopkSelect,
        Category::StatePropagation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Attention => "attention",
            Category::Ffn => "ffn",
            Category::Layernorm => "layernorm",
            Category::ConfidenceProjection => "confidence_projection",
            Category::ConfidenceSoftmax => "confidence_softmax",
            Category::ConfidenceMeasure => "confidence_measure",
            Category::TopkSelect => "topk_select",
            Category::StatePropagation => "state_propagation",
        }
    }

    pub fn is_confidence(self) -> bool {
        matches!(
            self,
            Category::ConfidenceProjection
                | Category::ConfidenceSoftmax
                | Category::ConfidenceMeasure
                | Category::TopkSelect
        )
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| invalid(format!("unknown FLOPs category `{s}`")))
    }
}

/// Categorized FLOP counters with per-token subtotals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlopsLedger {
    counts: [u64; 8],
    per_token: Vec<u64>,
    open: Option<u64>,
}

impl FlopsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, category: Category, count: u64) {
        self.counts[category as usize] += count;
        if let Some(open) = self.open.as_mut() {
            *open += count;
        }
    }

    pub fn record_named(&mut self, category: &str, count: u64) -> Result<()> {
        self.record(category.parse()?, count);
        Ok(())
    }

    /// Starts a per-token subtotal. Closing is done by [`end_token`](Self::end_token).
    pub fn begin_token(&mut self) {
        self.open = Some(0);
    }

    pub fn end_token(&mut self) {
        if let Some(total) = self.open.take() {
            self.per_token.push(total);
        }
    }

    pub fn get(&self, category: Category) -> u64 {
        self.counts[category as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn confidence_total(&self) -> u64 {
        Category::ALL
            .into_iter()
            .filter(|c| c.is_confidence())
            .map(|c| self.get(c))
            .sum()
    }

    pub fn per_token(&self) -> &[u64] {
        &self.per_token
    }

    /// Total FLOPs divided by the number of closed token subtotals.
    pub fn flops_per_token(&self) -> f64 {
        if self.per_token.is_empty() {
            0.0
        } else {
            self.total() as f64 / self.per_token.len() as f64
        }
    }

    pub fn merge(&mut self, other: &FlopsLedger) {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
        self.per_token.extend_from_slice(&other.per_token);
    }
}

impl Serialize for FlopsLedger {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(Category::ALL.len() + 2))?;
        for c in Category::ALL {
            map.serialize_entry(c.name(), &self.get(c))?;
        }
        map.serialize_entry("total", &self.total())?;
        map.serialize_entry("per_token", &self.per_token)?;
        map.end()
    }
}

pub fn projection_cost(rows: usize, cols: usize) -> u64 {
    2 * rows as u64 * cols as u64
}

pub fn softmax_cost(n: usize) -> u64 {
    SOFTMAX_PER_ELEMENT * n as u64
}

pub fn measure_cost(n: usize) -> u64 {
    MEASURE_PER_ELEMENT * n as u64
}

pub fn topk_cost(n: usize) -> u64 {
    TOPK_PER_ELEMENT * n as u64
}

pub fn layer_norm_cost(n: usize) -> u64 {
    LAYER_NORM_PER_ELEMENT * n as u64
}

/// Attention sub-block at a position that attends over `context` keys:
/// q/k/v/o projections, scores, per-head softmax, weighted values, residual.
pub fn attention_cost(d_model: usize, n_heads: usize, context: usize) -> u64 {
    4 * projection_cost(d_model, d_model)
        + 2 * 2 * (d_model * context) as u64
        + softmax_cost(n_heads * context)
        + d_model as u64
}

/// Feed-forward sub-block: two projections, GELU, residual.
pub fn ffn_cost(d_model: usize, d_ff: usize) -> u64 {
    2 * projection_cost(d_ff, d_model) + GELU_PER_ELEMENT * d_ff as u64 + d_model as u64
}

/// Filling one skipped layer's cache slot from a copied hidden state.
pub fn kv_fill_cost(d_model: usize) -> u64 {
    layer_norm_cost(d_model) + 2 * projection_cost(d_model, d_model)
}

/// Closed-form confidence cost of a run, by category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfidenceFlops {
    pub projection: u64,
    pub softmax: u64,
    pub measure: u64,
    pub topk: u64,
}

impl ConfidenceFlops {
    pub fn total(&self) -> u64 {
        self.projection + self.softmax + self.measure + self.topk
    }
}

/// Confidence FLOPs implied by a list of per-token exit layers.
///
/// Full mode evaluates `d_vocab` rows at every exit up to the exit layer. DVP
/// evaluates `d_vocab` rows at exits `<= p` and `K` rows after; the top-K
/// selection at `p` is charged only when the token goes past `p`.
pub fn expected_confidence_flops(
    policy: &ExitPolicy,
    mode: DecodeMode,
    exit_layers: &[usize],
    d_vocab: usize,
    d_model: usize,
) -> ConfidenceFlops {
    let prune = match mode {
        DecodeMode::Full => None,
        DecodeMode::Dvp => policy.prune_exit.map(|p| (p, policy.prune_size)),
    };
    let mut out = ConfidenceFlops::default();
    for &exit in exit_layers {
        let (full_exits, pruned_exits, k) = match prune {
            Some((p, k)) => (exit.min(p), exit.saturating_sub(p), k),
            None => (exit, 0, 0),
        };
        let rows = (full_exits * d_vocab + pruned_exits * k) as u64;
        out.projection += 2 * d_model as u64 * rows;
        out.softmax += SOFTMAX_PER_ELEMENT * rows;
        out.measure += MEASURE_PER_ELEMENT * rows;
        if pruned_exits > 0 {
            out.topk += topk_cost(d_vocab);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_semantics() {
        let mut l = FlopsLedger::new();
        l.record(Category::Ffn, 0);
        assert_eq!(l, FlopsLedger::new());
        l.record(Category::Ffn, 5);
        l.record(Category::Ffn, 5);
        assert_eq!(l.get(Category::Ffn), 10);
        assert!(l.record_named("bogus", 1).is_err());
        l.record_named("topk_select", 3).unwrap();
        assert_eq!(l.total(), 13);
    }

    #[test]
    fn per_token_subtotals() {
        let mut l = FlopsLedger::new();
        l.record(Category::Attention, 100); // outside any token
        l.begin_token();
        l.record(Category::Ffn, 7);
        l.record(Category::ConfidenceProjection, 3);
        l.end_token();
        l.begin_token();
        l.record(Category::Ffn, 1);
        l.end_token();
        assert_eq!(l.per_token(), &[10, 1]);
        assert_eq!(l.confidence_total(), 3);
        assert_eq!(l.flops_per_token(), 111.0 / 2.0);
    }

    #[test]
    fn projection_costs() {
        assert_eq!(projection_cost(32128, 1024), 65_798_144);
        assert_eq!(projection_cost(64, 1024), 131_072);
        assert_eq!(projection_cost(1, 1), 2);
    }

    #[test]
    fn category_names_round_trip() {
        for c in Category::ALL {
            assert_eq!(c.name().parse::<Category>().unwrap(), c);
        }
    }

    #[test]
    fn dvp_matches_full_before_pruning_exit() {
        let policy = ExitPolicy {
            prune_exit: Some(2),
            prune_size: 64,
            ..Default::default()
        };
        for exit in 1..=2 {
            let full = expected_confidence_flops(&policy, DecodeMode::Full, &[exit], 6400, 32);
            let dvp = expected_confidence_flops(&policy, DecodeMode::Dvp, &[exit], 6400, 32);
            assert_eq!(full, dvp);
        }
        let full = expected_confidence_flops(&policy, DecodeMode::Full, &[20], 6400, 32);
        let dvp = expected_confidence_flops(&policy, DecodeMode::Dvp, &[20], 6400, 32);
        assert_eq!(full.projection, 2 * 32 * 6400 * 20);
        assert_eq!(dvp.projection, 2 * 32 * (6400 * 2 + 64 * 18));
        assert_eq!(dvp.topk, 6400);
    }
}
