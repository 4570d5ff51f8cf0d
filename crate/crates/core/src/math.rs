//! Dense single-precision kernels shared by the model, the exit path and the
//! pruned projection.
//!
//! Every row projection goes through [`dot`], which accumulates strictly left
//! to right. Pruned logits are therefore bit-identical to the matching entries
//! of a full [`matvec`].

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};

pub const LAYER_NORM_EPS: f32 = 1e-6;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        check_dim("Matrix::new", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim("Matrix::from_rows", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(invalid(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }
}

/// Sequential left-to-right dot product.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn matvec(w: &Matrix, h: &[f32]) -> Result<Vec<f32>> {
    check_dim("matvec", w.cols, h.len())?;
    Ok((0..w.rows).map(|i| dot(w.row(i), h)).collect())
}

/// Numerically stable softmax. The normalizer is accumulated in double
/// precision so the result does not depend on the order of the entries
/// beyond the final rounding.
pub fn softmax(logits: &[f32]) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(invalid("softmax of an empty vector"));
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !max.is_finite() {
        return Err(invalid("softmax input is not finite"));
    }
    let exps: Vec<f32> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().map(|&e| e as f64).sum();
    Ok(exps.iter().map(|&e| (e as f64 / sum) as f32).collect())
}

/// Descending by value, ties by ascending index.
#[inline]
fn rank_order(values: &[f32], a: usize, b: usize) -> Ordering {
    values[b]
        .partial_cmp(&values[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Indices of the `k` largest entries in descending value order. Equal values
/// are ordered by lower index first.
pub fn top_k(values: &[f32], k: usize) -> Result<Vec<usize>> {
    let n = values.len();
    if k == 0 || k > n {
        return Err(invalid(format!("top_k needs 1 <= k <= {n}, got k = {k}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("top_k input is not finite"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if k < n {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(values, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(values, a, b));
    Ok(idx)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f32]) -> Result<usize> {
    Ok(top_k(values, 1)?[0])
}

pub fn layer_norm(h: &[f32], gain: &[f32]) -> Result<Vec<f32>> {
    check_dim("layer_norm", h.len(), gain.len())?;
    if h.is_empty() {
        return Err(invalid("layer_norm of an empty vector"));
    }
    let n = h.len() as f32;
    let mean = h.iter().sum::<f32>() / n;
    let var = h.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    Ok(h.iter()
        .zip(gain)
        .map(|(x, g)| (x - mean) * inv * g)
        .collect())
}

/// tanh approximation of GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matvec_identity_and_small() {
        let id = Matrix::identity(3);
        assert_eq!(matvec(&id, &[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matvec(&w, &[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
        assert!(matvec(&w, &[1.0]).is_err());
    }

    #[test]
    fn matvec_matches_double_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Matrix::new(8, 4, data.clone()).unwrap();
        let got = matvec(&w, &h).unwrap();
        for i in 0..8 {
            let want: f64 = (0..4).map(|j| data[i * 4 + j] as f64 * h[j] as f64).sum();
            let rel = (got[i] as f64 - want).abs() / want.abs().max(1e-12);
            assert!(rel < 1e-6 || (got[i] as f64 - want).abs() < 1e-7, "row {i}");
        }
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for c in [-30.0f32, 0.0, 7.5, 1e4] {
            assert_eq!(softmax(&[c; 4]).unwrap(), vec![0.25; 4]);
        }
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p[1] < 1e-30);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn top_k_cases() {
        assert_eq!(top_k(&[0.1, 2.3, -1.0, 0.5], 2).unwrap(), vec![1, 3]);
        assert_eq!(top_k(&[5.0, 5.0, 5.0], 2).unwrap(), vec![0, 1]);
        assert_eq!(
            top_k(&[1.0, 3.0, 1.0, 3.0, 2.0], 5).unwrap(),
            vec![1, 3, 4, 0, 2]
        );
        assert!(top_k(&[1.0], 0).is_err());
        assert!(top_k(&[1.0], 2).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let g = [1.0; 4];
        assert_eq!(layer_norm(&[1.0; 4], &g).unwrap(), vec![0.0; 4]);
        let y = layer_norm(&[1.0, -1.0], &[1.0, 1.0]).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-5 && (y[1] + 1.0).abs() < 1e-5);
        assert!(layer_norm(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn layer_norm_matches_double_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h: Vec<f32> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g: Vec<f32> = (0..16).map(|_| rng.random_range(0.5..1.5)).collect();
        let got = layer_norm(&h, &g).unwrap();
        let mean: f64 = h.iter().map(|&x| x as f64).sum::<f64>() / 16.0;
        let var: f64 = h.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / 16.0;
        for i in 0..16 {
            let want = (h[i] as f64 - mean) / (var + 1e-6).sqrt() * g[i] as f64;
            assert!((got[i] as f64 - want).abs() < 1e-6, "entry {i}");
        }
    }

    #[test]
    fn gather_rows_copies_in_order() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let g = w.gather_rows(&[2, 0]).unwrap();
        assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0]);
        assert!(w.gather_rows(&[3]).is_err());
    }
}
