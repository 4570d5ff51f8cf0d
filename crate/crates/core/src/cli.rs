//! Command-line surface of the `eevo` binary.
//!
//! Every long flag can also be given in a TOML file passed with `--config`;
//! the file uses the flag names as keys (`d-vocab = 512`, `lambda = 0.99`,
//! `grid = "1,2:16,64"`). Flags on the command line win over the file, and
//! the `EEVO_SEED` environment variable wins over both for the seed.
//!
//! Exit statuses: 0 ok, 2 usage, 3 I/O or weight-file errors, 4 numeric or
//! invariant violations. Errors print one line starting with
//! `error[usage]:`, `error[io]:` or `error[numeric]:`.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{calibrate, exhaustive_choice, prefix_agreement, rank_summary, rank_trace, CalibrationReport, GridPoint};
use crate::decoder::{generate, DecodeMode, GenerationResult, StopCondition, TokenStep, Timing};
use crate::error::EngineError;
use crate::flops::FlopsLedger;
use crate::model::{init_random_with, load_weights, save_weights, InitScheme, ModelConfig, ModelWeights, TokenId};
use crate::policy::{ConfidenceMeasure, ExitPolicy, ThresholdSchedule, DEFAULT_LAMBDA, DEFAULT_PRUNE_EXIT, DEFAULT_PRUNE_SIZE, DEFAULT_TAU};

pub const SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "EEVO_SEED";
pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_MAX_NEW_TOKENS: usize = 32;
pub const DEFAULT_DEMO_LEN: usize = 8;

/// Bundled text for the demo prompt source. Bytes map to token ids modulo
/// the vocabulary size.
pub const DEMO_CORPUS: &str = "\
The river ran low that summer, and the ferry kept to the deep channel near the mill. \
Children waded out to the sandbar each afternoon to count the herons standing in the shallows. \
When the rains came back in September the water rose over the bar in a single night. \
The miller said he had seen it happen twice before, once when he was a boy and once after the war. \
Nobody believed him until the old marks on the boathouse wall were found under the paint.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Io,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::Io => 3,
            ErrorKind::Numeric => 4,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Io => "io",
            ErrorKind::Numeric => "numeric",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Usage,
            message: msg.into(),
        }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Io,
            message: msg.into(),
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Numeric,
            message: msg.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let one_line = self.message.replace('\n', " ");
        write!(f, "error[{}]: {}", self.kind.tag(), one_line)
    }
}

impl std::error::Error for CliError {}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        let kind = match &e {
            EngineError::InvalidInput(_) | EngineError::Config(_) => ErrorKind::Usage,
            EngineError::Io(_) | EngineError::Format(_) => ErrorKind::Io,
            EngineError::Capacity { .. } | EngineError::DimensionMismatch { .. } => ErrorKind::Numeric,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "eevo", version, about = "Early-exit decoding with dynamic vocabulary pruning")]
pub struct Cli {
    /// TOML file whose keys mirror the long flags.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded weight file.
    InitModel(InitModelArgs),
    /// Decode one prompt and write its trace.
    Generate(GenerateArgs),
    /// Compare full and pruned confidence estimation over several thresholds.
    Bench(BenchArgs),
    /// Rank of the final prediction at every layer.
    RankAnalyze(RankArgs),
    /// Pick the cheapest (p, K) whose agreement drop stays within epsilon.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct ModelArgs {
    /// Weight file to load (excludes the architecture flags).
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    /// Number of layers L [default: 8].
    #[arg(long)]
    pub layers: Option<usize>,
    /// Hidden width [default: 64].
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Vocabulary size [default: 512].
    #[arg(long)]
    pub d_vocab: Option<usize>,
    /// Attention heads [default: 4].
    #[arg(long)]
    pub heads: Option<usize>,
    /// Feed-forward width [default: 4 * d_model].
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// Maximum context length [default: 256].
    #[arg(long)]
    pub max_seq: Option<usize>,
    /// Initialization seed; EEVO_SEED overrides it [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Initialization scheme: scaled or reference [default: scaled].
    #[arg(long)]
    pub init: Option<String>,
}

impl ModelArgs {
    fn merge(self, file: Self) -> Self {
        Self {
            model: self.model.or(file.model),
            layers: self.layers.or(file.layers),
            d_model: self.d_model.or(file.d_model),
            d_vocab: self.d_vocab.or(file.d_vocab),
            heads: self.heads.or(file.heads),
            d_ff: self.d_ff.or(file.d_ff),
            max_seq: self.max_seq.or(file.max_seq),
            seed: self.seed.or(file.seed),
            init: self.init.or(file.init),
        }
    }

    fn has_architecture_flags(&self) -> bool {
        self.layers.is_some()
            || self.d_model.is_some()
            || self.d_vocab.is_some()
            || self.heads.is_some()
            || self.d_ff.is_some()
            || self.max_seq.is_some()
            || self.init.is_some()
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct PolicyArgs {
    /// Confidence measure: top2-diff or max-softmax [default: top2-diff].
    #[arg(long)]
    pub measure: Option<String>,
    /// Exit threshold in [0, 1] [default: 0.6].
    #[arg(long)]
    pub lambda: Option<f32>,
    /// Threshold schedule: static or decaying [default: static].
    #[arg(long)]
    pub schedule: Option<String>,
    /// Decay rate of the decaying schedule [default: 4].
    #[arg(long)]
    pub tau: Option<f32>,
    /// Pruning exit p; 0 disables pruning [default: 2].
    #[arg(long)]
    pub p: Option<usize>,
    /// Pruned vocabulary size K [default: 64].
    #[arg(long)]
    pub k: Option<usize>,
    /// Tokens to generate per prompt [default: 32].
    #[arg(long, short = 'n')]
    pub max_new_tokens: Option<usize>,
    /// Decoding mode: full or dvp [default: dvp].
    #[arg(long)]
    pub mode: Option<String>,
    /// Stop after emitting this token id.
    #[arg(long)]
    pub end_token: Option<TokenId>,
}

impl PolicyArgs {
    fn merge(self, file: Self) -> Self {
        Self {
            measure: self.measure.or(file.measure),
            lambda: self.lambda.or(file.lambda),
            schedule: self.schedule.or(file.schedule),
            tau: self.tau.or(file.tau),
            p: self.p.or(file.p),
            k: self.k.or(file.k),
            max_new_tokens: self.max_new_tokens.or(file.max_new_tokens),
            mode: self.mode.or(file.mode),
            end_token: self.end_token.or(file.end_token),
        }
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct PromptArgs {
    /// Inline prompt as comma-separated token ids; repeat for more prompts.
    #[arg(long = "prompt", value_name = "IDS")]
    #[serde(rename = "prompt")]
    pub prompts: Vec<String>,
    /// File with one prompt per line (comma or whitespace separated ids).
    #[arg(long, value_name = "PATH")]
    pub prompt_file: Option<PathBuf>,
    /// Number of prompts cut from the bundled demo corpus.
    #[arg(long, value_name = "COUNT")]
    pub demo: Option<usize>,
    /// Length of each demo prompt [default: 8].
    #[arg(long)]
    pub demo_len: Option<usize>,
}

impl PromptArgs {
    fn merge(self, file: Self) -> Self {
        Self {
            prompts: if self.prompts.is_empty() { file.prompts } else { self.prompts },
            prompt_file: self.prompt_file.or(file.prompt_file),
            demo: self.demo.or(file.demo),
            demo_len: self.demo_len.or(file.demo_len),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct InitModelArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output weight file.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub prompts: PromptArgs,
    /// Trace JSON output; stdout when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub prompts: PromptArgs,
    /// Thresholds to sweep [default: 0.6,0.99].
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Vec<f32>,
    /// Write 0 in the conf_time_s column for byte-stable output.
    #[arg(long)]
    pub omit_timing: bool,
    /// CSV output; stdout when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub prompts: PromptArgs,
    /// Coverage cut-offs [default: 1,10,100].
    #[arg(long, value_delimiter = ',')]
    pub ks: Vec<usize>,
    /// CSV output; stdout when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub prompts: PromptArgs,
    /// Grid as `EXITS:SIZES`, e.g. `1,2,3:16,64,256,512` [default: 1,2,3:16,32,64,128].
    #[arg(long)]
    pub grid: Option<String>,
    /// Allowed agreement drop [default: 0].
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, hide = true)]
    pub exhaustive_check: bool,
    /// JSON output; stdout when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

/// Keys accepted in the `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct FileConfig {
    #[serde(flatten)]
    model: ModelArgs,
    #[serde(flatten)]
    policy: PolicyArgs,
    #[serde(flatten)]
    prompts: PromptArgs,
    out: Option<PathBuf>,
    lambdas: Option<Vec<f32>>,
    ks: Option<Vec<usize>>,
    grid: Option<String>,
    epsilon: Option<f64>,
}

const FILE_KEYS: &[&str] = &[
    "model", "layers", "d-model", "d-vocab", "heads", "d-ff", "max-seq", "seed", "init", "measure", "lambda",
    "schedule", "tau", "p", "k", "max-new-tokens", "mode", "end-token", "prompt", "prompt-file", "demo",
    "demo-len", "out", "lambdas", "ks", "grid", "epsilon",
];

fn read_file_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::usage(format!("{}: {}", path.display(), e.message())))?;
    if let Some(bad) = table.keys().find(|k| !FILE_KEYS.contains(&k.as_str())) {
        return Err(CliError::usage(format!("{}: unknown key `{bad}`", path.display())));
    }
    toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {}", path.display(), e.message())))
}

/// Where the weights come from.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ModelSource {
    File { path: PathBuf },
    Seeded { config: ModelConfig, seed: u64, init: InitScheme },
}

impl ModelSource {
    pub fn load(&self) -> CliResult<ModelWeights> {
        match self {
            ModelSource::File { path } => {
                load_weights(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
            }
            ModelSource::Seeded { config, seed, init } => Ok(init_random_with(*config, *seed, *init)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptSet {
    /// `demo`, `inline`, or the prompt file's stem.
    pub name: String,
    pub prompts: Vec<Vec<TokenId>>,
}

/// Fully resolved run: the `config` block of every report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelSource,
    pub policy: ExitPolicy,
    pub mode: DecodeMode,
    pub end_token: Option<TokenId>,
    pub prompt_source: String,
    pub prompts: Vec<Vec<TokenId>>,
}

impl RunConfig {
    pub fn stop(&self) -> StopCondition {
        StopCondition {
            max_new_tokens: self.policy.max_new_tokens,
            end_token: self.end_token,
        }
    }
}

fn seed_override() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::usage(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

pub fn resolve_model(args: &ModelArgs) -> CliResult<ModelSource> {
    if let Some(path) = &args.model {
        if args.has_architecture_flags() {
            return Err(CliError::usage("give either --model or architecture flags, not both"));
        }
        return Ok(ModelSource::File { path: path.clone() });
    }
    let d = ModelConfig::default();
    let d_model = args.d_model.unwrap_or(d.d_model);
    let config = ModelConfig {
        n_layers: args.layers.unwrap_or(d.n_layers),
        d_model,
        d_vocab: args.d_vocab.unwrap_or(d.d_vocab),
        n_heads: args.heads.unwrap_or(d.n_heads),
        d_ff: args.d_ff.unwrap_or(4 * d_model),
        max_seq: args.max_seq.unwrap_or(d.max_seq),
    };
    config.validate()?;
    let seed = seed_override()?.or(args.seed).unwrap_or(DEFAULT_SEED);
    let init = args.init.as_deref().unwrap_or("scaled").parse()?;
    Ok(ModelSource::Seeded { config, seed, init })
}

pub fn resolve_policy(args: &PolicyArgs) -> CliResult<(ExitPolicy, DecodeMode)> {
    let measure: ConfidenceMeasure = args.measure.as_deref().unwrap_or("top2-diff").parse()?;
    let lambda = args.lambda.unwrap_or(DEFAULT_LAMBDA);
    let schedule = match args.schedule.as_deref().unwrap_or("static") {
        "static" => ThresholdSchedule::Static { lambda },
        "decaying" => ThresholdSchedule::Decaying {
            lambda,
            tau: args.tau.unwrap_or(DEFAULT_TAU),
        },
        other => return Err(CliError::usage(format!("unknown schedule `{other}` (static or decaying)"))),
    };
    schedule.validate()?;
    let prune_exit = match args.p.unwrap_or(DEFAULT_PRUNE_EXIT) {
        0 => None,
        p => Some(p),
    };
    let mode: DecodeMode = args.mode.as_deref().unwrap_or("dvp").parse()?;
    let policy = ExitPolicy {
        measure,
        schedule,
        prune_exit,
        prune_size: args.k.unwrap_or(DEFAULT_PRUNE_SIZE),
        max_new_tokens: args.max_new_tokens.unwrap_or(DEFAULT_MAX_NEW_TOKENS),
    };
    Ok((policy, mode))
}

fn parse_ids(text: &str) -> CliResult<Vec<TokenId>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| CliError::usage(format!("`{s}` is not a token id")))
        })
        .collect()
}

/// Consecutive, non-overlapping slices of the demo corpus.
pub fn demo_prompts(count: usize, len: usize, d_vocab: usize) -> CliResult<Vec<Vec<TokenId>>> {
    let bytes = DEMO_CORPUS.as_bytes();
    if len == 0 || count * len > bytes.len() {
        return Err(CliError::usage(format!(
            "demo corpus has {} bytes; cannot cut {count} prompts of length {len}",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(len)
        .take(count)
        .map(|c| c.iter().map(|&b| (b as usize % d_vocab) as TokenId).collect())
        .collect())
}

pub fn resolve_prompts(args: &PromptArgs, d_vocab: usize, default_demo: usize) -> CliResult<PromptSet> {
    let sources = usize::from(!args.prompts.is_empty()) + usize::from(args.prompt_file.is_some()) + usize::from(args.demo.is_some());
    if sources > 1 {
        return Err(CliError::usage("give exactly one of --prompt, --prompt-file, --demo"));
    }
    let set = if !args.prompts.is_empty() {
        PromptSet {
            name: "inline".into(),
            prompts: args.prompts.iter().map(|p| parse_ids(p)).collect::<CliResult<_>>()?,
        }
    } else if let Some(path) = &args.prompt_file {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        PromptSet {
            name: path
                .file_stem()
                .map_or_else(|| "file".into(), |s| s.to_string_lossy().into_owned()),
            prompts: text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(parse_ids)
                .collect::<CliResult<_>>()?,
        }
    } else {
        PromptSet {
            name: "demo".into(),
            prompts: demo_prompts(
                args.demo.unwrap_or(default_demo),
                args.demo_len.unwrap_or(DEFAULT_DEMO_LEN),
                d_vocab,
            )?,
        }
    };
    if set.prompts.is_empty() || set.prompts.iter().any(Vec::is_empty) {
        return Err(CliError::usage("prompts must be non-empty"));
    }
    Ok(set)
}

fn resolve_run(
    model: &ModelArgs,
    policy: &PolicyArgs,
    prompts: &PromptArgs,
    default_demo: usize,
) -> CliResult<(RunConfig, ModelWeights)> {
    let source = resolve_model(model)?;
    let weights = source.load()?;
    let (policy, mode) = resolve_policy(policy)?;
    policy.validate(weights.config())?;
    let set = resolve_prompts(prompts, weights.config().d_vocab, default_demo)?;
    let cfg = RunConfig {
        model: source,
        policy,
        mode,
        end_token: None,
        prompt_source: set.name,
        prompts: set.prompts,
    };
    Ok((cfg, weights))
}

fn write_output(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// init-model

pub fn cmd_init_model(args: &InitModelArgs, file: &FileConfig) -> CliResult<String> {
    let model = args.model.clone().merge(file.model.clone());
    if model.model.is_some() {
        return Err(CliError::usage("init-model takes architecture flags, not --model"));
    }
    let out = args
        .out
        .clone()
        .or_else(|| file.out.clone())
        .ok_or_else(|| CliError::usage("init-model needs --out"))?;
    let source = resolve_model(&model)?;
    let weights = source.load()?;
    save_weights(&weights, &out).map_err(|e| CliError::io(format!("{}: {e}", out.display())))?;
    let ModelSource::Seeded { config: c, seed, init } = source else {
        unreachable!("init-model always seeds")
    };
    Ok(format!(
        "wrote {}: L={} d_model={} d_vocab={} n_heads={} d_ff={} max_seq={} seed={} init={}\n",
        out.display(),
        c.n_layers,
        c.d_model,
        c.d_vocab,
        c.n_heads,
        c.d_ff,
        c.max_seq,
        seed,
        serde_json::to_value(init).expect("enum serializes").as_str().unwrap_or("?"),
    ))
}

// ---------------------------------------------------------------------------
// generate

/// Top-level trace document.
#[derive(Debug, Serialize)]
pub struct Trace<'a> {
    pub schema_version: u32,
    pub config: &'a RunConfig,
    pub tokens: &'a [TokenId],
    pub steps: &'a [TokenStep],
    pub ledger: &'a FlopsLedger,
    pub timing: Timing,
}

pub fn trace_json(cfg: &RunConfig, result: &GenerationResult) -> String {
    let trace = Trace {
        schema_version: SCHEMA_VERSION,
        config: cfg,
        tokens: &result.tokens,
        steps: &result.steps,
        ledger: &result.ledger,
        timing: result.timing,
    };
    let mut s = serde_json::to_string_pretty(&trace).expect("trace serializes");
    s.push('\n');
    s
}

pub fn summary_line(result: &GenerationResult) -> String {
    format!(
        "tokens={} avg_exit={:.4} flops_per_token={:.1} conf_time_s={:.6}",
        result.tokens.len(),
        result.avg_exit(),
        result.ledger.flops_per_token(),
        result.timing.confidence_s
    )
}

pub struct GenerateOutput {
    pub config: RunConfig,
    pub result: GenerationResult,
    pub json: String,
    pub summary: String,
}

pub fn cmd_generate(args: &GenerateArgs, file: &FileConfig) -> CliResult<GenerateOutput> {
    let policy_args = args.policy.clone().merge(file.policy.clone());
    let (mut cfg, weights) = resolve_run(
        &args.model.clone().merge(file.model.clone()),
        &policy_args,
        &args.prompts.clone().merge(file.prompts.clone()),
        1,
    )?;
    if cfg.prompts.len() != 1 {
        return Err(CliError::usage(format!("generate takes one prompt, got {}", cfg.prompts.len())));
    }
    cfg.end_token = policy_args.end_token;
    let result = generate(&weights, &cfg.prompts[0], &cfg.policy, cfg.mode, cfg.stop())?;
    let json = trace_json(&cfg, &result);
    let summary = summary_line(&result);
    Ok(GenerateOutput {
        config: cfg,
        result,
        json,
        summary,
    })
}

// ---------------------------------------------------------------------------
// bench

pub const BENCH_HEADER: &str = "dataset,mode,lambda,score,flops_per_token,avg_exit,conf_time_s";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub dataset: String,
    pub mode: DecodeMode,
    pub lambda: f32,
    /// Mean prefix agreement with full-vocabulary decoding at the same threshold.
    pub score: f64,
    pub flops_per_token: f64,
    pub avg_exit: f64,
    pub conf_time_s: f64,
}

impl BenchRow {
    pub fn csv(&self, omit_timing: bool) -> String {
        format!(
            "{},{},{},{:.6},{:.1},{:.4},{:.6}",
            self.dataset,
            self.mode,
            self.lambda,
            self.score,
            self.flops_per_token,
            self.avg_exit,
            if omit_timing { 0.0 } else { self.conf_time_s }
        )
    }
}

pub fn bench_rows(weights: &ModelWeights, cfg: &RunConfig, lambdas: &[f32]) -> CliResult<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &lambda in lambdas {
        let mut policy = cfg.policy.clone();
        policy.schedule = match policy.schedule {
            ThresholdSchedule::Static { .. } => ThresholdSchedule::Static { lambda },
            ThresholdSchedule::Decaying { tau, .. } => ThresholdSchedule::Decaying { lambda, tau },
        };
        policy.schedule.validate()?;
        let mut baseline: Vec<Vec<TokenId>> = Vec::new();
        for mode in [DecodeMode::Full, DecodeMode::Dvp] {
            let mut ledger = FlopsLedger::new();
            let mut exits = 0usize;
            let mut tokens = 0usize;
            let mut conf_time = 0.0;
            let mut score = 0.0;
            for (i, prompt) in cfg.prompts.iter().enumerate() {
                let run = generate(weights, prompt, &policy, mode, cfg.stop())?;
                ledger.merge(&run.ledger);
                exits += run.steps.iter().map(|s| s.exit_layer).sum::<usize>();
                tokens += run.steps.len();
                conf_time += run.timing.confidence_s;
                if mode == DecodeMode::Full {
                    baseline.push(run.tokens);
                    score += 1.0;
                } else {
                    score += prefix_agreement(&baseline[i], &run.tokens);
                }
            }
            rows.push(BenchRow {
                dataset: cfg.prompt_source.clone(),
                mode,
                lambda,
                score: score / cfg.prompts.len() as f64,
                flops_per_token: ledger.flops_per_token(),
                avg_exit: if tokens == 0 { 0.0 } else { exits as f64 / tokens as f64 },
                conf_time_s: conf_time,
            });
        }
    }
    Ok(rows)
}

pub fn cmd_bench(args: &BenchArgs, file: &FileConfig) -> CliResult<String> {
    let (mut cfg, weights) = resolve_run(
        &args.model.clone().merge(file.model.clone()),
        &args.policy.clone().merge(file.policy.clone()),
        &args.prompts.clone().merge(file.prompts.clone()),
        8,
    )?;
    if cfg.policy.prune_exit.is_none() {
        return Err(CliError::usage("bench compares against pruning; p must be >= 1"));
    }
    cfg.mode = DecodeMode::Dvp;
    let lambdas = if !args.lambdas.is_empty() {
        args.lambdas.clone()
    } else {
        file.lambdas.clone().unwrap_or_else(|| vec![0.6, 0.99])
    };
    let rows = bench_rows(&weights, &cfg, &lambdas)?;
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv(args.omit_timing));
        out.push('\n');
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// rank-analyze / calibrate

pub fn cmd_rank_analyze(args: &RankArgs, file: &FileConfig) -> CliResult<String> {
    let (cfg, weights) = resolve_run(
        &args.model.clone().merge(file.model.clone()),
        &args.policy.clone().merge(file.policy.clone()),
        &args.prompts.clone().merge(file.prompts.clone()),
        8,
    )?;
    let ks = if !args.ks.is_empty() {
        args.ks.clone()
    } else {
        file.ks.clone().unwrap_or_else(|| vec![1, 10, 100])
    };
    let traces = cfg
        .prompts
        .iter()
        .map(|p| rank_trace(&weights, p, cfg.policy.max_new_tokens))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(rank_summary(&traces, &ks)?.to_csv())
}

/// Parses `EXITS:SIZES` into the cartesian grid. `SIZES` may use `V` for
/// the full vocabulary.
pub fn parse_grid(text: &str, d_vocab: usize) -> CliResult<Vec<GridPoint>> {
    let (exits, sizes) = text
        .split_once(':')
        .ok_or_else(|| CliError::usage(format!("grid `{text}` must look like EXITS:SIZES, e.g. 1,2:16,64")))?;
    let list = |s: &str| -> CliResult<Vec<usize>> {
        s.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|x| {
                if x.eq_ignore_ascii_case("v") {
                    Ok(d_vocab)
                } else {
                    x.parse().map_err(|_| CliError::usage(format!("`{x}` in grid is not a count")))
                }
            })
            .collect()
    };
    let grid = GridPoint::product(&list(exits)?, &list(sizes)?);
    if grid.is_empty() {
        return Err(CliError::usage("calibration grid is empty"));
    }
    Ok(grid)
}

pub fn cmd_calibrate(args: &CalibrateArgs, file: &FileConfig) -> CliResult<(CalibrationReport, String)> {
    let (cfg, weights) = resolve_run(
        &args.model.clone().merge(file.model.clone()),
        &args.policy.clone().merge(file.policy.clone()),
        &args.prompts.clone().merge(file.prompts.clone()),
        16,
    )?;
    let grid_text = args
        .grid
        .clone()
        .or_else(|| file.grid.clone())
        .unwrap_or_else(|| "1,2,3:16,32,64,128".into());
    let grid = parse_grid(&grid_text, weights.config().d_vocab)?;
    let epsilon = args.epsilon.or(file.epsilon).unwrap_or(0.0);
    let report = calibrate(&weights, &cfg.prompts, &grid, epsilon, &cfg.policy, cfg.stop())?;
    if args.exhaustive_check {
        let oracle = exhaustive_choice(&weights, &cfg.prompts, &grid, epsilon, &cfg.policy, cfg.stop())?;
        if oracle != report.chosen {
            return Err(CliError::numeric(format!(
                "calibration chose {:?} but exhaustive search chose {:?}",
                report.chosen, oracle
            )));
        }
    }
    #[derive(Serialize)]
    struct Doc<'a> {
        schema_version: u32,
        config: &'a RunConfig,
        report: &'a CalibrationReport,
    }
    let mut json = serde_json::to_string_pretty(&Doc {
        schema_version: SCHEMA_VERSION,
        config: &cfg,
        report: &report,
    })
    .expect("report serializes");
    json.push('\n');
    Ok((report, json))
}

// ---------------------------------------------------------------------------

/// Runs the CLI and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { ErrorKind::Usage.exit_code() } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.kind.exit_code()
        }
    }
}

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    let file = read_file_config(cli.config.as_deref())?;
    match &cli.command {
        Command::InitModel(a) => {
            print!("{}", cmd_init_model(a, &file)?);
        }
        Command::Generate(a) => {
            let out = cmd_generate(a, &file)?;
            let path = a.out.clone().or_else(|| file.out.clone());
            write_output(path.as_deref(), &out.json)?;
            let toks: Vec<String> = out.result.tokens.iter().map(u32::to_string).collect();
            eprintln!("tokens: {}", toks.join(","));
            eprintln!("{}", out.summary);
        }
        Command::Bench(a) => {
            let csv = cmd_bench(a, &file)?;
            write_output(a.out.clone().or_else(|| file.out.clone()).as_deref(), &csv)?;
        }
        Command::RankAnalyze(a) => {
            let csv = cmd_rank_analyze(a, &file)?;
            write_output(a.out.clone().or_else(|| file.out.clone()).as_deref(), &csv)?;
        }
        Command::Calibrate(a) => {
            let (report, json) = cmd_calibrate(a, &file)?;
            write_output(a.out.clone().or_else(|| file.out.clone()).as_deref(), &json)?;
            eprintln!(
                "chosen p={} K={}{}",
                report.chosen.prune_exit,
                report.chosen.prune_size,
                if report.fallback { " (fallback: no grid point within epsilon)" } else { "" }
            );
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        assert_eq!(
            parse_grid("1,2:16,V", 512).unwrap(),
            GridPoint::product(&[1, 2], &[16, 512])
        );
        assert!(parse_grid("1,2", 512).is_err());
        assert!(parse_grid(":16", 512).is_err());
        assert!(parse_grid("1:x", 512).is_err());
    }

    #[test]
    fn demo_prompts_are_in_range() {
        let p = demo_prompts(16, 8, 100).unwrap();
        assert_eq!(p.len(), 16);
        assert!(p.iter().flatten().all(|&t| t < 100));
        assert!(demo_prompts(1000, 8, 100).is_err());
        assert!(demo_prompts(1, 0, 100).is_err());
    }

    #[test]
    fn prompt_source_must_be_unique() {
        let args = PromptArgs {
            prompts: vec!["1,2".into()],
            demo: Some(2),
            ..Default::default()
        };
        assert_eq!(resolve_prompts(&args, 512, 1).unwrap_err().kind, ErrorKind::Usage);
        let args = PromptArgs {
            prompts: vec!["1, 2 3".into(), "4".into()],
            ..Default::default()
        };
        let set = resolve_prompts(&args, 512, 1).unwrap();
        assert_eq!(set.prompts, vec![vec![1, 2, 3], vec![4]]);
        assert_eq!(set.name, "inline");
    }

    #[test]
    fn policy_defaults() {
        let (p, mode) = resolve_policy(&PolicyArgs::default()).unwrap();
        assert_eq!(mode, DecodeMode::Dvp);
        assert_eq!(p.measure, ConfidenceMeasure::Top2Diff);
        assert_eq!(p.prune_exit, Some(2));
        assert_eq!(p.prune_size, 64);
        assert_eq!(p.schedule, ThresholdSchedule::Static { lambda: 0.6 });
        let (p, _) = resolve_policy(&PolicyArgs {
            schedule: Some("decaying".into()),
            p: Some(0),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(p.schedule, ThresholdSchedule::Decaying { lambda: 0.6, tau: 4.0 });
        assert_eq!(p.prune_exit, None);
        assert!(resolve_policy(&PolicyArgs {
            lambda: Some(1.5),
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn model_source_is_exclusive() {
        let args = ModelArgs {
            model: Some("w.bin".into()),
            layers: Some(4),
            ..Default::default()
        };
        assert_eq!(resolve_model(&args).unwrap_err().kind, ErrorKind::Usage);
        let args = ModelArgs {
            layers: Some(0),
            ..Default::default()
        };
        assert_eq!(resolve_model(&args).unwrap_err().kind, ErrorKind::Usage);
    }

    #[test]
    fn error_line_format() {
        let e = CliError::numeric("a\nb");
        assert_eq!(e.to_string(), "error[numeric]: a b");
        assert_eq!(e.kind.exit_code(), 4);
    }
}
