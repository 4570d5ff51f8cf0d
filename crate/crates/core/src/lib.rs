//! Early-exit autoregressive decoding with dynamic vocabulary pruning.
//!
//! A small decoder-only transformer exposes a candidate exit after every
//! block. Each exit projects the hidden state through the shared unembedding
//! matrix, turns the logits into a confidence score and stops the forward
//! pass once the score reaches the threshold. With pruning enabled, the
//! logits at one early exit select the top-K tokens and every later exit of
//! the same token projects onto those K rows only.
//!
//! Module map:
//!
//! - [`math`]: dense kernels (matvec, softmax, deterministic top-K, layer norm)
//! - [`model`]: configuration, weights, weight files, transformer blocks, KV cache
//! - [`policy`]: confidence measures, threshold schedules, exit rule
//! - [`dvp`]: pruned vocabulary construction and projection
//! - [`decoder`]: the early-exit decoding loop
//! - [`flops`]: FLOPs ledger and closed-form cost model
//! - [`analysis`]: rank convergence and (p, K) calibration
//! - [`cli`]: run configuration and report writers behind the `eevo` binary

pub mod analysis;
pub mod cli;
pub mod decoder;
pub mod dvp;
pub mod error;
pub mod flops;
pub mod math;
pub mod model;
pub mod policy;

pub use decoder::{generate, DecodeMode, GenerationResult, StopCondition, TokenStep};
pub use error::{EngineError, FormatError, Result};
pub use model::{init_random, init_random_with, InitScheme, ModelConfig, ModelWeights, TokenId};
pub use policy::{ConfidenceMeasure, ExitPolicy, ThresholdSchedule};
