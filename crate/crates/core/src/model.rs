//! Decoder-only toy transformer: token and learned position embeddings,
//! `L` pre-norm blocks (causal multi-head attention, GELU feed-forward) and
//! one unembedding matrix shared by every exit.
//!
//! # Weight file
//!
//! Little-endian, no padding:
//!
//! ```text
//! magic      b"EEVO"
//! version    u32 (= 1)
//! header     u32 x 6: L, d_model, d_vocab, n_heads, d_ff, max_seq
//! embedding      d_vocab x d_model
//! positions      max_seq x d_model
//! for each block 1..=L:
//!   ln1_gain     1 x d_model
//!   wq, wk, wv   d_model x d_model
//!   wo           d_model x d_model
//!   ln2_gain     1 x d_model
//!   w_in         d_ff x d_model
//!   w_out        d_model x d_ff
//! unembedding    d_vocab x d_model
//! ```
//!
//! Matrices are row-major IEEE-754 binary32.
//!
//! # Initialization
//!
//! Every tensor draws from its own ChaCha8 stream (`seed`, stream = tensor
//! index in file order) and is filled with standard normal samples scaled by
//! the scheme's standard deviation. Layer-norm gains start at 1.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, EngineError, FormatError, Result};
use crate::math::{dot, gelu, layer_norm, softmax, Matrix};

pub const MAGIC: &[u8; 4] = b"EEVO";
pub const FORMAT_VERSION: u32 = 1;

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_vocab: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            d_vocab: 512,
            n_heads: 4,
            d_ff: 256,
            max_seq: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.violation()
            .map_or(Ok(()), |(field, reason)| Err(EngineError::Config(format!("{field}: {reason}"))))
    }

    fn violation(&self) -> Option<(&'static str, String)> {
        if self.n_layers < 2 {
            return Some(("n_layers", format!("L = {} but at least 2 layers are required", self.n_layers)));
        }
        if self.d_model == 0 {
            return Some(("d_model", "must be positive".into()));
        }
        if self.n_heads == 0 {
            return Some(("n_heads", "must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Some((
                "n_heads",
                format!("d_model = {} is not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        if self.d_vocab < 2 {
            return Some(("d_vocab", format!("d_vocab = {} but at least 2 are required", self.d_vocab)));
        }
        if self.d_ff == 0 {
            return Some(("d_ff", "must be positive".into()));
        }
        if self.max_seq == 0 {
            return Some(("max_seq", "must be positive".into()));
        }
        None
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// How `init_random_with` scales the Gaussian draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Every matrix ~ N(0, (0.02 / sqrt(L))^2).
    #[default]
    Reference,
    /// Unit-variance token embeddings, N(0, 0.25) position embeddings,
    /// block matrices with std `1/sqrt(fan_in)` and unembedding with std
    /// `2/sqrt(d_model)`. Blocks move the residual stream by O(1) per layer, so
    /// predictions sharpen with depth and exits spread across layers.
    Scaled,
}

impl std::str::FromStr for InitScheme {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Self::Reference),
            "scaled" => Ok(Self::Scaled),
            other => Err(invalid(format!("unknown init scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_gain: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gain: Vec<f32>,
    pub w_in: Matrix,
    pub w_out: Matrix,
}

/// Immutable model parameters. Cheap to share across concurrent decodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    embedding: Matrix,
    positions: Matrix,
    blocks: Vec<BlockWeights>,
    unembedding: Matrix,
}

/// Tensor shapes in file order: (name, rows, cols, block index).
fn layout(c: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = c.d_model;
    let mut out = vec![
        ("embedding".to_string(), c.d_vocab, d),
        ("positions".to_string(), c.max_seq, d),
    ];
    for l in 1..=c.n_layers {
        for (name, r, k) in [
            ("ln1_gain", 1, d),
            ("wq", d, d),
            ("wk", d, d),
            ("wv", d, d),
            ("wo", d, d),
            ("ln2_gain", 1, d),
            ("w_in", c.d_ff, d),
            ("w_out", d, c.d_ff),
        ] {
            out.push((format!("block{l}.{name}"), r, k));
        }
    }
    out.push(("unembedding".to_string(), c.d_vocab, d));
    out
}

impl ModelWeights {
    fn from_tensors(config: ModelConfig, tensors: Vec<Matrix>) -> Self {
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("tensor count matches layout");
        let embedding = next();
        let positions = next();
        let blocks = (0..config.n_layers)
            .map(|_| BlockWeights {
                ln1_gain: next().data().to_vec(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ln2_gain: next().data().to_vec(),
                w_in: next(),
                w_out: next(),
            })
            .collect();
        let unembedding = next();
        Self {
            config,
            embedding,
            positions,
            blocks,
            unembedding,
        }
    }

    fn tensors(&self) -> Vec<Matrix> {
        let d = self.config.d_model;
        let gain = |g: &Vec<f32>| Matrix::new(1, d, g.clone()).expect("gain length is d_model");
        let mut out = vec![self.embedding.clone(), self.positions.clone()];
        for b in &self.blocks {
            out.extend([
                gain(&b.ln1_gain),
                b.wq.clone(),
                b.wk.clone(),
                b.wv.clone(),
                b.wo.clone(),
                gain(&b.ln2_gain),
                b.w_in.clone(),
                b.w_out.clone(),
            ]);
        }
        out.push(self.unembedding.clone());
        out
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    pub fn positions(&self) -> &Matrix {
        &self.positions
    }

    /// Block `layer`, 1-based.
    pub fn block(&self, layer: usize) -> &BlockWeights {
        &self.blocks[layer - 1]
    }

    /// The single unembedding matrix used at every exit.
    pub fn unembedding(&self) -> &Matrix {
        &self.unembedding
    }

    /// Raw little-endian bytes of every tensor, in file order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_weights(self, &mut buf);
        buf
    }
}

pub fn init_random(config: ModelConfig, seed: u64) -> Result<ModelWeights> {
    init_random_with(config, seed, InitScheme::Reference)
}

pub fn init_random_with(config: ModelConfig, seed: u64, scheme: InitScheme) -> Result<ModelWeights> {
    config.validate()?;
    let reference_std = 0.02 / (config.n_layers as f64).sqrt();
    let tensors = layout(&config)
        .into_iter()
        .enumerate()
        .map(|(stream, (name, rows, cols))| {
            if name.ends_with("_gain") {
                return Matrix::new(rows, cols, vec![1.0; rows * cols]);
            }
            let std = match scheme {
                InitScheme::Reference => reference_std,
                InitScheme::Scaled => match name.as_str() {
                    "embedding" => 1.0,
                    "positions" => 0.5,
                    "unembedding" => 2.0 / (cols as f64).sqrt(),
                    _ => 1.0 / (cols as f64).sqrt(),
                },
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream as u64);
            let data = (0..rows * cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * std) as f32
                })
                .collect();
            Matrix::new(rows, cols, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelWeights::from_tensors(config, tensors))
}

fn write_weights(w: &ModelWeights, buf: &mut Vec<u8>) {
    let c = &w.config;
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [c.n_layers, c.d_model, c.d_vocab, c.n_heads, c.d_ff, c.max_seq] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for m in w.tensors() {
        for x in m.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

pub fn save_weights(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, weights.to_bytes())?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    parse_weights(&fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> std::result::Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated { field: field.to_string() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> std::result::Result<u32, FormatError> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn parse_weights(bytes: &[u8]) -> Result<ModelWeights> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic([magic[0], magic[1], magic[2], magic[3]]).into());
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let mut header = [0usize; 6];
    let names = ["n_layers", "d_model", "d_vocab", "n_heads", "d_ff", "max_seq"];
    for (slot, name) in header.iter_mut().zip(names) {
        *slot = r.u32(name)? as usize;
    }
    let config = ModelConfig {
        n_layers: header[0],
        d_model: header[1],
        d_vocab: header[2],
        n_heads: header[3],
        d_ff: header[4],
        max_seq: header[5],
    };
    if let Some((field, reason)) = config.violation() {
        return Err(FormatError::ConfigInvariant { field, reason }.into());
    }
    let mut tensors = Vec::new();
    for (name, rows, cols) in layout(&config) {
        let raw = r.take(rows * cols * 4, &name)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(FormatError::NonFinite { field: name }.into());
        }
        tensors.push(Matrix::new(rows, cols, data)?);
    }
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - r.pos).into());
    }
    Ok(ModelWeights::from_tensors(config, tensors))
}

/// Row `token` of the embedding matrix.
pub fn embed(weights: &ModelWeights, token: TokenId) -> Result<Vec<f32>> {
    let v = weights.config.d_vocab;
    if token as usize >= v {
        return Err(invalid(format!("token id {token} out of range for vocabulary {v}")));
    }
    Ok(weights.embedding.row(token as usize).to_vec())
}

/// Token embedding plus learned position embedding: the block-1 input.
pub fn input_vector(weights: &ModelWeights, token: TokenId, position: usize) -> Result<Vec<f32>> {
    let max_seq = weights.config.max_seq;
    if position >= max_seq {
        return Err(EngineError::Capacity { position, max_seq });
    }
    let mut h = embed(weights, token)?;
    for (x, p) in h.iter_mut().zip(weights.positions.row(position)) {
        *x += p;
    }
    Ok(h)
}

/// Per-layer attention keys and values for every position processed so far.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    d_model: usize,
    max_seq: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            d_model: config.d_model,
            max_seq: config.max_seq,
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    /// Number of cached positions at `layer` (1-based).
    pub fn len(&self, layer: usize) -> usize {
        self.keys[layer - 1].len() / self.d_model
    }

    pub fn is_empty(&self) -> bool {
        self.keys.iter().all(Vec::is_empty)
    }

    pub fn key(&self, layer: usize, position: usize) -> &[f32] {
        &self.keys[layer - 1][position * self.d_model..(position + 1) * self.d_model]
    }

    pub fn value(&self, layer: usize, position: usize) -> &[f32] {
        &self.values[layer - 1][position * self.d_model..(position + 1) * self.d_model]
    }

    pub fn append(&mut self, layer: usize, key: &[f32], value: &[f32]) -> Result<()> {
        check_dim("KvCache::append", self.d_model, key.len())?;
        check_dim("KvCache::append", self.d_model, value.len())?;
        let position = self.len(layer);
        if position >= self.max_seq {
            return Err(EngineError::Capacity {
                position,
                max_seq: self.max_seq,
            });
        }
        self.keys[layer - 1].extend_from_slice(key);
        self.values[layer - 1].extend_from_slice(value);
        Ok(())
    }
}

fn check_slot(weights: &ModelWeights, layer: usize, cache: &KvCache, position: usize) -> Result<()> {
    let c = &weights.config;
    if layer == 0 || layer > c.n_layers {
        return Err(invalid(format!("layer {layer} outside 1..={}", c.n_layers)));
    }
    if position >= c.max_seq {
        return Err(EngineError::Capacity {
            position,
            max_seq: c.max_seq,
        });
    }
    if cache.n_layers() != c.n_layers {
        return Err(invalid("cache was built for a different model"));
    }
    if cache.len(layer) != position {
        return Err(invalid(format!(
            "cache at layer {layer} holds {} positions, expected {position}",
            cache.len(layer)
        )));
    }
    Ok(())
}

/// Key and value projections of `h` as seen by block `layer`'s attention.
pub fn kv_projection(weights: &ModelWeights, layer: usize, h: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
    let b = weights.block(layer);
    let x = layer_norm(h, &b.ln1_gain)?;
    Ok((project(&b.wk, &x), project(&b.wv, &x)))
}

#[inline]
fn project(w: &Matrix, x: &[f32]) -> Vec<f32> {
    (0..w.rows()).map(|i| dot(w.row(i), x)).collect()
}

/// Runs block `layer` (1-based) on the hidden state at `position`, appending
/// this position's key and value to the cache.
pub fn forward_block(
    weights: &ModelWeights,
    layer: usize,
    h: &[f32],
    cache: &mut KvCache,
    position: usize,
) -> Result<Vec<f32>> {
    check_slot(weights, layer, cache, position)?;
    let c = &weights.config;
    check_dim("forward_block", c.d_model, h.len())?;
    let b = weights.block(layer);

    let x = layer_norm(h, &b.ln1_gain)?;
    let q = project(&b.wq, &x);
    cache.append(layer, &project(&b.wk, &x), &project(&b.wv, &x))?;

    let dh = c.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let mut attn = vec![0.0f32; c.d_model];
    for head in 0..c.n_heads {
        let span = head * dh..(head + 1) * dh;
        let scores: Vec<f32> = (0..=position)
            .map(|j| dot(&q[span.clone()], &cache.key(layer, j)[span.clone()]) * scale)
            .collect();
        let weights_j = softmax(&scores)?;
        for (j, a) in weights_j.iter().enumerate() {
            let v = &cache.value(layer, j)[span.clone()];
            for (o, vv) in attn[span.clone()].iter_mut().zip(v) {
                *o += a * vv;
            }
        }
    }
    let mut h1: Vec<f32> = h.to_vec();
    for (r, o) in h1.iter_mut().zip(project(&b.wo, &attn)) {
        *r += o;
    }

    let y = layer_norm(&h1, &b.ln2_gain)?;
    let hidden: Vec<f32> = project(&b.w_in, &y).into_iter().map(gelu).collect();
    for (r, f) in h1.iter_mut().zip(project(&b.w_out, &hidden)) {
        *r += f;
    }
    Ok(h1)
}

/// Runs one position through all `L` blocks without any exit evaluation and
/// returns every layer's hidden state (index `l - 1` holds layer `l`).
pub fn forward_all(
    weights: &ModelWeights,
    token: TokenId,
    cache: &mut KvCache,
    position: usize,
) -> Result<Vec<Vec<f32>>> {
    let mut h = input_vector(weights, token, position)?;
    let mut states = Vec::with_capacity(weights.config.n_layers);
    for layer in 1..=weights.config.n_layers {
        h = forward_block(weights, layer, &h, cache, position)?;
        states.push(h.clone());
    }
    Ok(states)
}
