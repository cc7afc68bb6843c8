//! Query-guided importance scoring and budgeted retention.
//!
//! The current frame's queries are reduced to a handful of rows (special
//! tokens verbatim, patch tokens averaged in groups of `g`, everything
//! averaged over heads). Each prunable cached token is scored by its mean
//! inner product with those rows; no attention probabilities are needed.

use crate::config::StreamConfig;
use crate::error::{Error, Result};
use crate::kv_cache::{KVCacheLayer, PruneSelection};
use crate::numerics::{dot, grouped_mean, matmul, top_k_indices, MultiHeadTensor, RealMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct PooledQuery {
    /// `n_special + ceil(N / g)` rows, head-averaged.
    pub matrix: RealMatrix,
    pub n_special: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub scores: Vec<f32>,
    /// Cache index of the first scored token.
    pub offset: usize,
}

pub fn build_pooled_query(q_t: &MultiHeadTensor, n_special: usize, g: usize) -> Result<PooledQuery> {
    if n_special >= q_t.tokens() {
        return Err(Error::param(format!(
            "{n_special} special tokens leave no patch tokens among {}",
            q_t.tokens()
        )));
    }
    if g == 0 {
        return Err(Error::param("pooling size must be at least 1"));
    }
    // Head averaging commutes with slicing and grouping, so do it first.
    let mean = q_t.head_mean();
    let special = mean.slice_rows(0, n_special);
    let pooled = grouped_mean(&mean.slice_rows(n_special, mean.rows()), g)?;
    Ok(PooledQuery {
        matrix: special.vstack(&pooled)?,
        n_special,
    })
}

/// Head-averaged keys of the middle segment `t_first .. T - t_current`.
pub fn summarize_prunable_keys(k_cache: &MultiHeadTensor, t_first: usize, t_current: usize) -> Result<RealMatrix> {
    let total = k_cache.tokens();
    if t_first + t_current > total {
        return Err(Error::param(format!(
            "protected segments {t_first} + {t_current} exceed {total} cached tokens"
        )));
    }
    Ok(k_cache.head_mean_range(t_first, total - t_current))
}

/// The full pooled-query-by-key score matrix, one row per pooled query.
pub fn score_matrix(pooled: &PooledQuery, key_summary: &RealMatrix) -> Result<RealMatrix> {
    check_channels(pooled, key_summary)?;
    matmul(&pooled.matrix, &key_summary.transpose())
}

/// `scores[j] = mean_i <pooled_i, key_j>`, without softmax or scaling.
pub fn score_tokens(pooled: &PooledQuery, key_summary: &RealMatrix, offset: usize) -> Result<ImportanceScores> {
    check_channels(pooled, key_summary)?;
    // The mean of inner products is the inner product with the mean query.
    let rows = pooled.matrix.rows().max(1) as f64;
    let mut mean = vec![0.0f64; pooled.matrix.cols()];
    for r in 0..pooled.matrix.rows() {
        for (m, &v) in mean.iter_mut().zip(pooled.matrix.row(r)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows);
    let scores = (0..key_summary.rows())
        .map(|j| {
            let s: f64 = mean.iter().zip(key_summary.row(j)).map(|(&m, &k)| m * k as f64).sum();
            s as f32
        })
        .collect();
    Ok(ImportanceScores { scores, offset })
}

fn check_channels(pooled: &PooledQuery, key_summary: &RealMatrix) -> Result<()> {
    if pooled.matrix.cols() != key_summary.cols() {
        return Err(Error::dim(format!(
            "pooled queries have {} channels, key summary {}",
            pooled.matrix.cols(),
            key_summary.cols()
        )));
    }
    Ok(())
}

/// First-frame prefix, the `budget - t_first - t_current` best middle tokens,
/// and the current-frame suffix.
pub fn select_keep_indices(
    scores: &ImportanceScores,
    total: usize,
    t_first: usize,
    t_current: usize,
    budget: usize,
) -> Result<PruneSelection> {
    if budget < t_first + t_current {
        return Err(Error::BudgetInfeasible {
            budget,
            first: t_first,
            current: t_current,
        });
    }
    if total <= budget {
        return Err(Error::param(format!(
            "pruning needs more than {budget} tokens, cache holds {total}"
        )));
    }
    let prunable = total - t_first - t_current;
    if scores.scores.len() != prunable {
        return Err(Error::dim(format!(
            "{} scores for {prunable} prunable tokens",
            scores.scores.len()
        )));
    }
    let k = budget - t_first - t_current;
    let middle: Vec<usize> = top_k_indices(&scores.scores, k)?
        .into_iter()
        .map(|i| i + t_first)
        .collect();
    PruneSelection::from_middle(total, t_first, t_current, &middle)
}

/// Prunes `layer` back to its budget if the current frame pushed it over.
/// Returns the applied selection, or `None` when nothing was pruned.
pub fn prune_step(
    layer: &mut KVCacheLayer,
    q_t: &MultiHeadTensor,
    config: &StreamConfig,
) -> Result<Option<PruneSelection>> {
    let total = layer.total_tokens();
    if total <= layer.budget() {
        return Ok(None);
    }
    let (t_first, t_current) = (layer.t_first(), layer.t_current());
    let (keys, _) = layer.read_full_precision()?;
    let summary = summarize_prunable_keys(&keys, t_first, t_current)?;
    let pooled = build_pooled_query(q_t, config.special_tokens(), config.pooling)?;
    let scores = score_tokens(&pooled, &summary, t_first)?;
    let sel = select_keep_indices(&scores, total, t_first, t_current, layer.budget())?;
    layer.gather(&sel)?;
    Ok(Some(sel))
}

/// Mean score per prunable token, straight from the explicit score matrix.
/// Slower than [`score_tokens`]; useful for dumps and cross-checks.
pub fn column_means(s: &RealMatrix) -> Vec<f32> {
    let ones = vec![1.0f32; s.rows()];
    let t = s.transpose();
    (0..t.rows())
        .map(|j| (dot(t.row(j), &ones) / s.rows().max(1) as f64) as f32)
        .collect()
}
