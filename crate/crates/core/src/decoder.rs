//! Early-exit greedy decoding.
//!
//! For every generated token the layers run in order. After each layer the
//! hidden state is projected to logits (full unembedding, or the pruned rows
//! once pruning has happened), the confidence is compared with the token's
//! threshold, and the first layer whose confidence reaches the threshold emits
//! its argmax. The last layer emits unconditionally.
//!
//! Layers skipped by an early exit still need a key and value for the current
//! position. They are filled by state copying: the exit layer's hidden state
//! stands in as the input of every skipped layer.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dvp::{prune, PrunedVocab};
use crate::error::{invalid, EngineError, Result};
use crate::flops::{
    attention_cost, ffn_cost, kv_fill_cost, layer_norm_cost, measure_cost, projection_cost, softmax_cost,
    topk_cost, Category, FlopsLedger,
};
use crate::math::{argmax, matvec};
use crate::model::{forward_all, forward_block, input_vector, kv_projection, KvCache, ModelWeights, TokenId};
use crate::policy::{confidence_from_logits, should_exit, ExitPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Full-vocabulary confidence at every exit.
    Full,
    /// Full vocabulary up to the pruning exit, pruned rows afterwards.
    Dvp,
}

impl std::str::FromStr for DecodeMode {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "dvp" => Ok(Self::Dvp),
            other => Err(invalid(format!("unknown mode `{other}` (expected full or dvp)"))),
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Dvp => "dvp",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenStep {
    pub token: TokenId,
    pub exit_layer: usize,
    /// `(layer, confidence)` for every evaluated exit, in layer order.
    pub confidences: Vec<(usize, f32)>,
    pub pruned_at: Option<usize>,
    #[serde(rename = "threshold")]
    pub threshold_used: f32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Timing {
    pub total_s: f64,
    pub confidence_s: f64,
}

#[derive(Debug, Clone)]
pub struct GenerationResult {
    pub tokens: Vec<TokenId>,
    pub steps: Vec<TokenStep>,
    pub ledger: FlopsLedger,
    pub timing: Timing,
}

impl GenerationResult {
    pub fn exit_layers(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.exit_layer).collect()
    }

    /// Mean exit layer over generated tokens, 0 when nothing was generated.
    pub fn avg_exit(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.exit_layer as f64).sum::<f64>() / self.steps.len() as f64
    }

    /// Everything except wall-clock timing.
    pub fn same_outcome(&self, other: &GenerationResult) -> bool {
        self.tokens == other.tokens && self.steps == other.steps && self.ledger == other.ledger
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StopCondition {
    pub max_new_tokens: usize,
    pub end_token: Option<TokenId>,
}

impl StopCondition {
    pub fn new(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            end_token: None,
        }
    }
}

/// Hook called after every layer of a decode step, before the exit decision.
pub trait ExitObserver {
    fn on_layer(&mut self, _layer: usize, _hidden: &[f32], _pruned: Option<&PrunedVocab>) {}
}

impl ExitObserver for () {}

impl<F: FnMut(usize, &[f32], Option<&PrunedVocab>)> ExitObserver for F {
    fn on_layer(&mut self, layer: usize, hidden: &[f32], pruned: Option<&PrunedVocab>) {
        self(layer, hidden, pruned)
    }
}

/// Mutable per-decode state: the cache, the ledger and the confidence clock.
pub struct DecodeState<'w> {
    pub weights: &'w ModelWeights,
    pub cache: KvCache,
    pub ledger: FlopsLedger,
    pub confidence_time: Duration,
}

impl<'w> DecodeState<'w> {
    pub fn new(weights: &'w ModelWeights) -> Self {
        Self {
            weights,
            cache: KvCache::new(weights.config()),
            ledger: FlopsLedger::new(),
            confidence_time: Duration::ZERO,
        }
    }
}

fn check_mode(policy: &ExitPolicy, mode: DecodeMode) -> Result<()> {
    if mode == DecodeMode::Dvp && policy.prune_exit.is_none() {
        return Err(invalid("dvp mode needs a pruning exit"));
    }
    Ok(())
}

/// Decodes one token at `position` whose input is `input`. `step` is the
/// 0-based index of the generated token and selects the threshold.
pub fn decode_token(
    state: &mut DecodeState<'_>,
    input: TokenId,
    position: usize,
    step: usize,
    policy: &ExitPolicy,
    mode: DecodeMode,
) -> Result<TokenStep> {
    decode_token_observed(state, input, position, step, policy, mode, &mut ())
}

pub fn decode_token_observed(
    state: &mut DecodeState<'_>,
    input: TokenId,
    position: usize,
    step: usize,
    policy: &ExitPolicy,
    mode: DecodeMode,
    observer: &mut dyn ExitObserver,
) -> Result<TokenStep> {
    check_mode(policy, mode)?;
    let weights = state.weights;
    let cfg = *weights.config();
    let threshold = policy.threshold_at(step)?;
    let prune_exit = match mode {
        DecodeMode::Full => None,
        DecodeMode::Dvp => policy.prune_exit,
    };

    let mut h = input_vector(weights, input, position)?;
    let mut pruned: Option<PrunedVocab> = None;
    let mut confidences = Vec::with_capacity(cfg.n_layers);

    for layer in 1..=cfg.n_layers {
        h = forward_block(weights, layer, &h, &mut state.cache, position)?;
        let ledger = &mut state.ledger;
        ledger.record(Category::Attention, attention_cost(cfg.d_model, cfg.n_heads, position + 1));
        ledger.record(Category::Ffn, ffn_cost(cfg.d_model, cfg.d_ff));
        ledger.record(Category::Layernorm, 2 * layer_norm_cost(cfg.d_model));
        observer.on_layer(layer, &h, pruned.as_ref());

        let clock = Instant::now();
        let logits = match &pruned {
            Some(pv) => pv.project(&h)?,
            None => matvec(weights.unembedding(), &h)?,
        };
        let rows = logits.len();
        ledger.record(Category::ConfidenceProjection, projection_cost(rows, cfg.d_model));
        ledger.record(Category::ConfidenceSoftmax, softmax_cost(rows));
        // A single surviving candidate has no runner-up: its gap is the whole mass.
        let c = if rows == 1 { 1.0 } else { confidence_from_logits(&logits, policy.measure)? };
        ledger.record(Category::ConfidenceMeasure, measure_cost(rows));
        confidences.push((layer, c));

        if should_exit(c, threshold) || layer == cfg.n_layers {
            let local = argmax(&logits)?;
            let token = match &pruned {
                Some(pv) => pv.remap(local)?,
                None => local as TokenId,
            };
            state.confidence_time += clock.elapsed();
            propagate_state(weights, &mut state.cache, &mut state.ledger, layer, &h, position)?;
            return Ok(TokenStep {
                token,
                exit_layer: layer,
                confidences,
                pruned_at: pruned.as_ref().map(PrunedVocab::source_exit),
                threshold_used: threshold,
            });
        }

        if prune_exit == Some(layer) {
            pruned = Some(prune(weights.unembedding(), &logits, policy.prune_size, layer)?);
            ledger.record(Category::TopkSelect, topk_cost(cfg.d_vocab));
        }
        state.confidence_time += clock.elapsed();
    }
    unreachable!("the last layer always exits")
}

/// Fills keys and values of layers above `exit_layer` at `position` from the
/// exit layer's hidden state.
pub fn propagate_state(
    weights: &ModelWeights,
    cache: &mut KvCache,
    ledger: &mut FlopsLedger,
    exit_layer: usize,
    hidden: &[f32],
    position: usize,
) -> Result<()> {
    let cfg = weights.config();
    if exit_layer == 0 || exit_layer > cfg.n_layers {
        return Err(invalid(format!("exit layer {exit_layer} outside 1..={}", cfg.n_layers)));
    }
    for layer in exit_layer + 1..=cfg.n_layers {
        if cache.len(layer) != position {
            return Err(invalid(format!(
                "cache at layer {layer} holds {} positions, expected {position}",
                cache.len(layer)
            )));
        }
        let (k, v) = kv_projection(weights, layer, hidden)?;
        cache.append(layer, &k, &v)?;
        ledger.record(Category::StatePropagation, kv_fill_cost(cfg.d_model));
    }
    Ok(())
}

/// Runs every prompt token except the last through all layers.
pub fn ingest_prompt(state: &mut DecodeState<'_>, prompt: &[TokenId]) -> Result<()> {
    for (pos, &tok) in prompt.iter().enumerate().take(prompt.len().saturating_sub(1)) {
        forward_all(state.weights, tok, &mut state.cache, pos)?;
    }
    Ok(())
}

fn check_request(weights: &ModelWeights, prompt: &[TokenId], policy: &ExitPolicy, stop: &StopCondition) -> Result<()> {
    let cfg = weights.config();
    policy.validate(cfg)?;
    if prompt.is_empty() {
        return Err(invalid("prompt must contain at least one token"));
    }
    if let Some(&bad) = prompt.iter().find(|&&t| t as usize >= cfg.d_vocab) {
        return Err(invalid(format!("prompt token {bad} out of range for vocabulary {}", cfg.d_vocab)));
    }
    if stop.max_new_tokens > policy.max_new_tokens {
        return Err(invalid(format!(
            "requested {} tokens but the policy horizon is {}",
            stop.max_new_tokens, policy.max_new_tokens
        )));
    }
    if prompt.len() + stop.max_new_tokens > cfg.max_seq {
        return Err(EngineError::Capacity {
            position: prompt.len() + stop.max_new_tokens,
            max_seq: cfg.max_seq,
        });
    }
    Ok(())
}

pub fn generate(
    weights: &ModelWeights,
    prompt: &[TokenId],
    policy: &ExitPolicy,
    mode: DecodeMode,
    stop: StopCondition,
) -> Result<GenerationResult> {
    generate_observed(weights, prompt, policy, mode, stop, &mut |_: usize, _: &TokenStep| {}, &mut ())
}

/// [`generate`] with callbacks: `on_step` after every emitted token,
/// `observer` after every layer.
pub fn generate_observed(
    weights: &ModelWeights,
    prompt: &[TokenId],
    policy: &ExitPolicy,
    mode: DecodeMode,
    stop: StopCondition,
    on_step: &mut dyn FnMut(usize, &TokenStep),
    observer: &mut dyn ExitObserver,
) -> Result<GenerationResult> {
    check_request(weights, prompt, policy, &stop)?;
    check_mode(policy, mode)?;
    let started = Instant::now();
    let mut state = DecodeState::new(weights);
    let mut tokens = Vec::with_capacity(stop.max_new_tokens);
    let mut steps = Vec::with_capacity(stop.max_new_tokens);

    if stop.max_new_tokens > 0 {
        ingest_prompt(&mut state, prompt)?;
        let mut input = *prompt.last().expect("prompt is non-empty");
        for t in 0..stop.max_new_tokens {
            state.ledger.begin_token();
            let step = decode_token_observed(&mut state, input, prompt.len() - 1 + t, t, policy, mode, observer)?;
            state.ledger.end_token();
            on_step(t, &step);
            input = step.token;
            tokens.push(step.token);
            steps.push(step);
            if stop.end_token == Some(input) {
                break;
            }
        }
    }

    Ok(GenerationResult {
        tokens,
        steps,
        ledger: state.ledger,
        timing: Timing {
            total_s: started.elapsed().as_secs_f64(),
            confidence_s: state.confidence_time.as_secs_f64(),
        },
    })
}
