//! Dynamic vocabulary pruning.
//!
//! At the pruning exit the full logits pick the `K` most likely tokens, and
//! the matching rows of the unembedding matrix are copied into a `K x d_model`
//! matrix. Every later exit of the same decode step projects onto those rows
//! only. A fresh [`PrunedVocab`] is built for every generated token.

use crate::error::{check_dim, invalid, Result};
use crate::math::{dot, top_k, Matrix};
use crate::model::TokenId;

#[derive(Debug, Clone, PartialEq)]
pub struct PrunedVocab {
    token_ids: Vec<TokenId>,
    rows: Matrix,
    source_exit: usize,
}

impl PrunedVocab {
    /// Retained token ids, most likely first.
    pub fn token_ids(&self) -> &[TokenId] {
        &self.token_ids
    }

    /// The gathered `K x d_model` unembedding rows.
    pub fn matrix(&self) -> &Matrix {
        &self.rows
    }

    pub fn source_exit(&self) -> usize {
        self.source_exit
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn contains(&self, token: TokenId) -> bool {
        self.token_ids.contains(&token)
    }

    /// Logits of the retained tokens. Entry `i` is bit-identical to the full
    /// logit of `token_ids[i]`.
    pub fn project(&self, h: &[f32]) -> Result<Vec<f32>> {
        check_dim("project_pruned", self.rows.cols(), h.len())?;
        Ok((0..self.rows.rows()).map(|i| dot(self.rows.row(i), h)).collect())
    }

    /// Original vocabulary id of a pruned-logit index.
    pub fn remap(&self, local: usize) -> Result<TokenId> {
        self.token_ids
            .get(local)
            .copied()
            .ok_or_else(|| invalid(format!("local index {local} out of range for K = {}", self.len())))
    }
}

/// Builds the pruned vocabulary from the logits observed at `source_exit`.
pub fn prune(unembedding: &Matrix, logits: &[f32], k: usize, source_exit: usize) -> Result<PrunedVocab> {
    check_dim("prune", unembedding.rows(), logits.len())?;
    let ids = top_k(logits, k)?;
    let rows = unembedding.gather_rows(&ids)?;
    Ok(PrunedVocab {
        token_ids: ids.into_iter().map(|i| i as TokenId).collect(),
        rows,
        source_exit,
    })
}

pub fn project_pruned(pv: &PrunedVocab, h: &[f32]) -> Result<Vec<f32>> {
    pv.project(h)
}

pub fn remap(pv: &PrunedVocab, local: usize) -> Result<TokenId> {
    pv.remap(local)
}
