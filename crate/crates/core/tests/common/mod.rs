//! Double-precision reference implementation of the model, shared by the
//! integration tests. It repeats the engine's formulas from scratch on
//! `f64` copies of the weights and does not call any engine kernel.

#![allow(dead_code)]

use eevo::model::ModelWeights;
use eevo::{init_random_with, InitScheme, ModelConfig, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn to_mat(m: &eevo::math::Matrix) -> Mat {
    (0..m.rows()).map(|i| m.row(i).iter().map(|&x| x as f64).collect()).collect()
}

fn to_vec(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub struct RefBlock {
    ln1: Vec<f64>,
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
    ln2: Vec<f64>,
    w_in: Mat,
    w_out: Mat,
}

pub struct RefModel {
    pub cfg: ModelConfig,
    emb: Mat,
    pos: Mat,
    blocks: Vec<RefBlock>,
    pub unemb: Mat,
}

#[derive(Clone)]
pub struct RefCache {
    pub keys: Vec<Vec<Vec<f64>>>,
    pub values: Vec<Vec<Vec<f64>>>,
}

pub fn mv(w: &Mat, x: &[f64]) -> Vec<f64> {
    w.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

pub fn ln(h: &[f64], g: &[f64]) -> Vec<f64> {
    let n = h.len() as f64;
    let mean = h.iter().sum::<f64>() / n;
    let var = h.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    h.iter().zip(g).map(|(x, g)| (x - mean) / (var + 1e-6).sqrt() * g).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn top2_diff(p: &[f64]) -> f64 {
    let mut s = p.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s[0] - s.get(1).copied().unwrap_or(0.0)
}

impl RefModel {
    pub fn new(w: &ModelWeights) -> Self {
        let cfg = *w.config();
        let blocks = (1..=cfg.n_layers)
            .map(|l| {
                let b = w.block(l);
                RefBlock {
                    ln1: to_vec(&b.ln1_gain),
                    wq: to_mat(&b.wq),
                    wk: to_mat(&b.wk),
                    wv: to_mat(&b.wv),
                    wo: to_mat(&b.wo),
                    ln2: to_vec(&b.ln2_gain),
                    w_in: to_mat(&b.w_in),
                    w_out: to_mat(&b.w_out),
                }
            })
            .collect();
        Self {
            cfg,
            emb: to_mat(w.embedding()),
            pos: to_mat(w.positions()),
            blocks,
            unemb: to_mat(w.unembedding()),
        }
    }

    pub fn cache(&self) -> RefCache {
        RefCache {
            keys: vec![Vec::new(); self.cfg.n_layers],
            values: vec![Vec::new(); self.cfg.n_layers],
        }
    }

    pub fn input(&self, token: TokenId, position: usize) -> Vec<f64> {
        self.emb[token as usize].iter().zip(&self.pos[position]).map(|(a, b)| a + b).collect()
    }

    pub fn kv(&self, layer: usize, h: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let b = &self.blocks[layer - 1];
        let x = ln(h, &b.ln1);
        (mv(&b.wk, &x), mv(&b.wv, &x))
    }

    pub fn block(&self, layer: usize, h: &[f64], cache: &mut RefCache) -> Vec<f64> {
        let b = &self.blocks[layer - 1];
        let x = ln(h, &b.ln1);
        let q = mv(&b.wq, &x);
        cache.keys[layer - 1].push(mv(&b.wk, &x));
        cache.values[layer - 1].push(mv(&b.wv, &x));
        let d = self.cfg.d_model;
        let dh = d / self.cfg.n_heads;
        let mut attn = vec![0.0; d];
        for head in 0..self.cfg.n_heads {
            let r = head * dh..(head + 1) * dh;
            let scores: Vec<f64> = cache.keys[layer - 1]
                .iter()
                .map(|k| q[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let a = softmax(&scores);
            for (j, aj) in a.iter().enumerate() {
                for i in r.clone() {
                    attn[i] += aj * cache.values[layer - 1][j][i];
                }
            }
        }
        let h1: Vec<f64> = h.iter().zip(mv(&b.wo, &attn)).map(|(a, b)| a + b).collect();
        let y = ln(&h1, &b.ln2);
        let hid: Vec<f64> = mv(&b.w_in, &y).into_iter().map(gelu).collect();
        h1.iter().zip(mv(&b.w_out, &hid)).map(|(a, b)| a + b).collect()
    }

    /// Runs one position up to `exit_layer`, then fills the remaining
    /// layers' keys and values from the exit layer's state. Returns the
    /// hidden states of layers `1..=exit_layer`.
    pub fn step(&self, cache: &mut RefCache, token: TokenId, position: usize, exit_layer: usize) -> Vec<Vec<f64>> {
        let mut h = self.input(token, position);
        let mut out = Vec::new();
        for layer in 1..=exit_layer {
            h = self.block(layer, &h, cache);
            out.push(h.clone());
        }
        for layer in exit_layer + 1..=self.cfg.n_layers {
            let (k, v) = self.kv(layer, &h);
            cache.keys[layer - 1].push(k);
            cache.values[layer - 1].push(v);
        }
        out
    }

    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        mv(&self.unemb, h)
    }
}

pub fn max_rel_err(got: &[f32], want: &[f64]) -> f64 {
    let scale = want.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-12);
    got.iter().zip(want).map(|(&g, w)| (g as f64 - w).abs() / scale).fold(0.0, f64::max)
}

/// Configuration of the `i`-th model in the identity-equivalence sweep.
pub fn sweep_config(i: u64) -> ModelConfig {
    let n_layers = [4, 8][(i % 2) as usize];
    let d_model = [32, 64][((i / 2) % 2) as usize];
    let d_vocab = [128, 512][((i / 4) % 2) as usize];
    ModelConfig {
        n_layers,
        d_model,
        d_vocab,
        n_heads: 4,
        d_ff: 2 * d_model,
        max_seq: 64,
    }
}

pub fn sweep_model(i: u64) -> ModelWeights {
    init_random_with(sweep_config(i), 1000 + i, InitScheme::Scaled).unwrap()
}

pub fn random_prompts(seed: u64, count: usize, d_vocab: usize) -> Vec<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let len = rng.random_range(3..9);
            (0..len).map(|_| rng.random_range(0..d_vocab as TokenId)).collect()
        })
        .collect()
}
