//! Rank convergence of the final prediction across layers, and calibration
//! of the pruning exit and pruned vocabulary size.

use rayon::prelude::*;
use serde::Serialize;

use crate::decoder::{generate, DecodeMode, StopCondition};
use crate::error::{invalid, Result};
use crate::flops::expected_confidence_flops;
use crate::math::{argmax, matvec};
use crate::model::{forward_all, KvCache, ModelWeights, TokenId};
use crate::policy::ExitPolicy;

/// Per generated token, the 1-based rank of the final-layer prediction in
/// every layer's full logits (index `l - 1` holds layer `l`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RankTrace {
    pub tokens: Vec<TokenId>,
    pub ranks: Vec<Vec<u32>>,
}

/// Full logits of every layer for one generated token.
pub type LayerLogits = Vec<Vec<f32>>;

/// Rank of `target` under descending-value, lower-index-first order.
fn rank_of(logits: &[f32], target: usize) -> u32 {
    let v = logits[target];
    let ahead = logits
        .iter()
        .enumerate()
        .filter(|&(i, &x)| x > v || (x == v && i < target))
        .count();
    ahead as u32 + 1
}

pub fn rank_trace(weights: &ModelWeights, prompt: &[TokenId], n: usize) -> Result<RankTrace> {
    Ok(rank_trace_recorded(weights, prompt, n, false)?.0)
}

/// Greedy generation through all layers with no exits. When `keep_logits`
/// is set, every layer's logits are returned alongside the trace.
pub fn rank_trace_recorded(
    weights: &ModelWeights,
    prompt: &[TokenId],
    n: usize,
    keep_logits: bool,
) -> Result<(RankTrace, Vec<LayerLogits>)> {
    let cfg = weights.config();
    if prompt.is_empty() {
        return Err(invalid("prompt must contain at least one token"));
    }
    if prompt.len() + n > cfg.max_seq {
        return Err(crate::error::EngineError::Capacity {
            position: prompt.len() + n,
            max_seq: cfg.max_seq,
        });
    }
    let mut cache = KvCache::new(cfg);
    for (pos, &tok) in prompt[..prompt.len() - 1].iter().enumerate() {
        forward_all(weights, tok, &mut cache, pos)?;
    }
    let mut trace = RankTrace {
        tokens: Vec::with_capacity(n),
        ranks: Vec::with_capacity(n),
    };
    let mut saved = Vec::new();
    let mut input = *prompt.last().expect("non-empty");
    for t in 0..n {
        let states = forward_all(weights, input, &mut cache, prompt.len() - 1 + t)?;
        let logits = states
            .iter()
            .map(|h| matvec(weights.unembedding(), h))
            .collect::<Result<Vec<_>>>()?;
        let last = logits.last().expect("at least two layers");
        let token = argmax(last)?;
        trace.ranks.push(logits.iter().map(|l| rank_of(l, token)).collect());
        trace.tokens.push(token as TokenId);
        if keep_logits {
            saved.push(logits);
        }
        input = token as TokenId;
    }
    Ok((trace, saved))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRankStats {
    pub layer: usize,
    pub mean_rank: f64,
    pub median_rank: f64,
    /// Fraction of tokens with rank <= k, one entry per configured k.
    pub coverage: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankSummary {
    pub ks: Vec<usize>,
    pub layers: Vec<LayerRankStats>,
}

impl RankSummary {
    pub fn coverage(&self, layer: usize, k: usize) -> Option<f64> {
        let j = self.ks.iter().position(|&x| x == k)?;
        self.layers.get(layer.checked_sub(1)?).map(|row| row.coverage[j])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,mean_rank,median_rank");
        for k in &self.ks {
            out.push_str(&format!(",coverage_{k}"));
        }
        out.push('\n');
        for row in &self.layers {
            out.push_str(&format!("{},{:.6},{:.6}", row.layer, row.mean_rank, row.median_rank));
            for c in &row.coverage {
                out.push_str(&format!(",{c:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Pools every token of every trace and summarizes ranks per layer.
pub fn rank_summary(traces: &[RankTrace], ks: &[usize]) -> Result<RankSummary> {
    let rows: Vec<&Vec<u32>> = traces.iter().flat_map(|t| t.ranks.iter()).collect();
    if rows.is_empty() {
        return Err(invalid("rank summary needs at least one generated token"));
    }
    if ks.contains(&0) {
        return Err(invalid("coverage cut-offs must be >= 1"));
    }
    let n_layers = rows[0].len();
    if rows.iter().any(|r| r.len() != n_layers) {
        return Err(invalid("traces come from models with different depths"));
    }
    let count = rows.len() as f64;
    let layers = (0..n_layers)
        .map(|l| {
            let mut col: Vec<u32> = rows.iter().map(|r| r[l]).collect();
            col.sort_unstable();
            let mean_rank = col.iter().map(|&r| r as f64).sum::<f64>() / count;
            let mid = col.len() / 2;
            let median_rank = if col.len() % 2 == 1 {
                col[mid] as f64
            } else {
                (col[mid - 1] as f64 + col[mid] as f64) / 2.0
            };
            let coverage = ks
                .iter()
                .map(|&k| col.partition_point(|&r| r as usize <= k) as f64 / count)
                .collect();
            LayerRankStats {
                layer: l + 1,
                mean_rank,
                median_rank,
                coverage,
            }
        })
        .collect();
    Ok(RankSummary { ks: ks.to_vec(), layers })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GridPoint {
    pub prune_exit: usize,
    pub prune_size: usize,
}

impl GridPoint {
    pub fn new(prune_exit: usize, prune_size: usize) -> Self {
        Self { prune_exit, prune_size }
    }

    /// Cartesian product of pruning exits and sizes, exits outermost.
    pub fn product(exits: &[usize], sizes: &[usize]) -> Vec<GridPoint> {
        exits
            .iter()
            .flat_map(|&p| sizes.iter().map(move |&k| GridPoint::new(p, k)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridResult {
    pub prune_exit: usize,
    pub prune_size: usize,
    pub score: f64,
    pub drop: f64,
    pub confidence_flops: u64,
    pub avg_exit: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub epsilon: f64,
    pub baseline_confidence_flops: u64,
    pub grid: Vec<GridResult>,
    pub chosen: GridPoint,
    /// True when no grid point met the tolerance and the full vocabulary was
    /// selected instead.
    pub fallback: bool,
}

/// Length of the common prefix over the longer of the two sequences.
pub fn prefix_agreement(reference: &[TokenId], candidate: &[TokenId]) -> f64 {
    let longest = reference.len().max(candidate.len());
    if longest == 0 {
        return 1.0;
    }
    let common = reference.iter().zip(candidate).take_while(|(a, b)| a == b).count();
    common as f64 / longest as f64
}

fn check_calibration_inputs(weights: &ModelWeights, prompts: &[Vec<TokenId>], grid: &[GridPoint], epsilon: f64) -> Result<()> {
    if grid.is_empty() {
        return Err(invalid("calibration grid is empty"));
    }
    if prompts.is_empty() {
        return Err(invalid("calibration needs at least one prompt"));
    }
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(invalid(format!("tolerance {epsilon} must be >= 0")));
    }
    let cfg = weights.config();
    for g in grid {
        if g.prune_exit == 0 || g.prune_exit >= cfg.n_layers || g.prune_size == 0 || g.prune_size > cfg.d_vocab {
            return Err(invalid(format!(
                "grid point (p = {}, K = {}) is invalid for L = {}, d_vocab = {}",
                g.prune_exit, g.prune_size, cfg.n_layers, cfg.d_vocab
            )));
        }
    }
    Ok(())
}

fn with_point(template: &ExitPolicy, g: GridPoint) -> ExitPolicy {
    ExitPolicy {
        prune_exit: Some(g.prune_exit),
        prune_size: g.prune_size,
        ..template.clone()
    }
}

fn evaluate_point(
    weights: &ModelWeights,
    prompts: &[Vec<TokenId>],
    baseline: &[Vec<TokenId>],
    g: GridPoint,
    epsilon: f64,
    template: &ExitPolicy,
    stop: StopCondition,
) -> Result<GridResult> {
    let cfg = weights.config();
    let policy = with_point(template, g);
    let mut score = 0.0;
    let mut cost = 0;
    let mut exits = 0usize;
    let mut tokens = 0usize;
    for (prompt, base) in prompts.iter().zip(baseline) {
        let run = generate(weights, prompt, &policy, DecodeMode::Dvp, stop)?;
        score += prefix_agreement(base, &run.tokens);
        let layers = run.exit_layers();
        cost += expected_confidence_flops(&policy, DecodeMode::Dvp, &layers, cfg.d_vocab, cfg.d_model).total();
        exits += layers.iter().sum::<usize>();
        tokens += layers.len();
    }
    let score = score / prompts.len() as f64;
    let drop = 1.0 - score;
    Ok(GridResult {
        prune_exit: g.prune_exit,
        prune_size: g.prune_size,
        score,
        drop,
        confidence_flops: cost,
        avg_exit: if tokens == 0 { 0.0 } else { exits as f64 / tokens as f64 },
        feasible: drop <= epsilon,
    })
}

/// Evaluates every grid point against the full-vocabulary baseline and picks
/// the feasible point with the lowest expected confidence FLOPs (ties: smaller
/// K, then smaller p).
pub fn calibrate(
    weights: &ModelWeights,
    prompts: &[Vec<TokenId>],
    grid: &[GridPoint],
    epsilon: f64,
    template: &ExitPolicy,
    stop: StopCondition,
) -> Result<CalibrationReport> {
    check_calibration_inputs(weights, prompts, grid, epsilon)?;
    let cfg = weights.config();
    let baseline_runs = prompts
        .par_iter()
        .map(|p| generate(weights, p, template, DecodeMode::Full, stop))
        .collect::<Result<Vec<_>>>()?;
    let baseline_confidence_flops = baseline_runs
        .iter()
        .map(|r| expected_confidence_flops(template, DecodeMode::Full, &r.exit_layers(), cfg.d_vocab, cfg.d_model).total())
        .sum();
    let baseline: Vec<Vec<TokenId>> = baseline_runs.into_iter().map(|r| r.tokens).collect();

    let results = grid
        .par_iter()
        .map(|&g| evaluate_point(weights, prompts, &baseline, g, epsilon, template, stop))
        .collect::<Result<Vec<_>>>()?;

    let best = results
        .iter()
        .filter(|r| r.feasible)
        .fold(None::<&GridResult>, |best, r| match best {
            Some(b) if (b.confidence_flops, b.prune_size, b.prune_exit) <= (r.confidence_flops, r.prune_size, r.prune_exit) => Some(b),
            _ => Some(r),
        });
    let (chosen, fallback) = match best {
        Some(r) => (GridPoint::new(r.prune_exit, r.prune_size), false),
        None => {
            let p = grid.iter().map(|g| g.prune_exit).min().expect("grid is non-empty");
            (GridPoint::new(p, cfg.d_vocab), true)
        }
    };
    Ok(CalibrationReport {
        epsilon,
        baseline_confidence_flops,
        grid: results,
        chosen,
        fallback,
    })
}

/// Brute-force reference for [`calibrate`]: every cell is evaluated in
/// sequence, all cells are sorted by (feasibility, cost, K, p) and the head
/// is taken.
pub fn exhaustive_choice(
    weights: &ModelWeights,
    prompts: &[Vec<TokenId>],
    grid: &[GridPoint],
    epsilon: f64,
    template: &ExitPolicy,
    stop: StopCondition,
) -> Result<GridPoint> {
    check_calibration_inputs(weights, prompts, grid, epsilon)?;
    let cfg = weights.config();
    let mut baseline = Vec::with_capacity(prompts.len());
    for p in prompts {
        baseline.push(generate(weights, p, template, DecodeMode::Full, stop)?.tokens);
    }
    let mut cells = Vec::with_capacity(grid.len());
    for &g in grid {
        let policy = with_point(template, g);
        let mut agreement = Vec::with_capacity(prompts.len());
        let mut cost = 0u64;
        for (p, base) in prompts.iter().zip(&baseline) {
            let run = generate(weights, p, &policy, DecodeMode::Dvp, stop)?;
            agreement.push(prefix_agreement(base, &run.tokens));
            cost += expected_confidence_flops(&policy, DecodeMode::Dvp, &run.exit_layers(), cfg.d_vocab, cfg.d_model).total();
        }
        let score = agreement.iter().sum::<f64>() / agreement.len() as f64;
        cells.push((1.0 - score > epsilon, cost, g.prune_size, g.prune_exit));
    }
    cells.sort();
    match cells.first() {
        Some(&(false, _, k, p)) => Ok(GridPoint::new(p, k)),
        _ => Ok(GridPoint::new(
            grid.iter().map(|g| g.prune_exit).min().expect("non-empty"),
            cfg.d_vocab,
        )),
    }
}
