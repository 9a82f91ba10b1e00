//! Exact softmax attention, codeword-based score approximation, and the
//! top-K retrieval policy.
//!
//! Ranking scores deliberately omit the `1/sqrt(d)` factor: positive
//! scaling cannot change a top-K set. The factor is applied inside the
//! softmax of [`exact_attention`] and [`selective_attention`].
//! Ties — in scores and in recall sets — always resolve to the lower token
//! index.

use crate::codebook::{Codebook, CodeIndexVector};
use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};
use crate::rope::RopeConfig;

/// Retrieval policy: fractional top-K plus statically preserved sentinel
/// (initial) and recent tokens.
#[derive(Debug, Clone)]
pub struct RetrievalPolicy {
    topk_fraction: f64,
    sentinel_tokens: usize,
    recent_tokens: usize,
}

impl RetrievalPolicy {
    /// Defaults: 4 sentinel tokens, 64 recent tokens.
    pub fn new(topk_fraction: f64) -> Result<Self> {
        Self::with_preservation(topk_fraction, 4, 64)
    }

    pub fn with_preservation(
        topk_fraction: f64,
        sentinel_tokens: usize,
        recent_tokens: usize,
    ) -> Result<Self> {
        if !(topk_fraction > 0.0 && topk_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "topk_fraction must be in (0, 1], got {topk_fraction}"
            )));
        }
        Ok(Self {
            topk_fraction,
            sentinel_tokens,
            recent_tokens,
        })
    }

    pub fn topk_fraction(&self) -> f64 {
        self.topk_fraction
    }

    pub fn sentinel_tokens(&self) -> usize {
        self.sentinel_tokens
    }

    pub fn recent_tokens(&self) -> usize {
        self.recent_tokens
    }

    /// Top-K budget for a context of `n` tokens: `ceil(fraction * n)`, at
    /// least 1 for non-empty contexts.
    pub fn budget(&self, n: usize) -> usize {
        if n == 0 {
            return 0;
        }
        ((self.topk_fraction * n as f64).ceil() as usize).clamp(1, n)
    }
}

/// Outcome of one top-K selection.
#[derive(Debug, Clone)]
pub struct SelectionResult {
    /// Sorted, unique, in `[0, n)`.
    pub selected_indices: Vec<usize>,
    /// The scores the selection was made from.
    pub approx_scores: Vec<f64>,
    /// Recall against exact scores, when the caller computed it.
    pub exact_recall: Option<f64>,
}

impl SelectionResult {
    pub fn selected_count(&self) -> usize {
        self.selected_indices.len()
    }
}

/// Indices of the `k` largest scores; ties resolve to the lower index.
fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Union of the top-K scores with the statically preserved sentinel and
/// recent tokens. The selected set may exceed the bare budget; degenerate
/// contexts (`n <= sentinel + recent`) select everything.
pub fn select_topk(scores: &[f64], policy: &RetrievalPolicy) -> SelectionResult {
    let n = scores.len();
    let budget = policy.budget(n);
    let mut picked = vec![false; n];
    for ix in top_k_indices(scores, budget) {
        picked[ix] = true;
    }
    for ix in 0..policy.sentinel_tokens.min(n) {
        picked[ix] = true;
    }
    for ix in n.saturating_sub(policy.recent_tokens)..n {
        picked[ix] = true;
    }
    let selected_indices: Vec<usize> = (0..n).filter(|&i| picked[i]).collect();
    SelectionResult {
        selected_indices,
        approx_scores: scores.to_vec(),
        exact_recall: None,
    }
}

/// Numerically safe softmax-weighted combination of value rows, restricted
/// to `rows`. Two-pass: subtract the max logit, exponentiate, normalize.
fn attend_rows(
    query: &[f64],
    keys: &Matrix,
    values: &Matrix,
    rows: &[usize],
    inv_sqrt_d: f64,
) -> Vec<f64> {
    let mut logits = Vec::with_capacity(rows.len());
    let mut max_logit = f64::NEG_INFINITY;
    for &r in rows {
        let u = dot(query, keys.row(r)) * inv_sqrt_d;
        if u > max_logit {
            max_logit = u;
        }
        logits.push(u);
    }
    let mut weights = Vec::with_capacity(rows.len());
    let mut total = 0.0;
    for u in &logits {
        let w = (u - max_logit).exp();
        total += w;
        weights.push(w);
    }
    let mut out = vec![0.0; values.cols()];
    for (w, &r) in weights.iter().zip(rows) {
        let coeff = w / total;
        let v = values.row(r);
        for c in 0..out.len() {
            out[c] += coeff * v[c];
        }
    }
    out
}

/// Attention over every row of already-gathered tensors; shares the exact
/// accumulation order of [`selective_attention`].
pub(crate) fn attend_all(
    query: &[f64],
    keys: &Matrix,
    values: &Matrix,
    inv_sqrt_d: f64,
) -> Vec<f64> {
    let rows: Vec<usize> = (0..keys.rows()).collect();
    attend_rows(query, keys, values, &rows, inv_sqrt_d)
}

/// Softmax attention of one query over the whole cache:
/// `softmax(q K^T / sqrt(d)) V`. Query and keys are post-embedding states.
pub fn exact_attention(
    query_row: &[f64],
    keys: &Matrix,
    values: &Matrix,
    cfg: &RopeConfig,
) -> Result<Vec<f64>> {
    if keys.rows() == 0 {
        return Err(Error::Empty("attention over empty cache".into()));
    }
    if keys.rows() != values.rows() {
        return Err(Error::Dimension(format!(
            "{} keys vs {} values",
            keys.rows(),
            values.rows()
        )));
    }
    if query_row.len() != cfg.head_dim() || keys.cols() != cfg.head_dim() {
        return Err(Error::Dimension(format!(
            "head_dim {} vs query {} / keys {}",
            cfg.head_dim(),
            query_row.len(),
            keys.cols()
        )));
    }
    let all: Vec<usize> = (0..keys.rows()).collect();
    Ok(attend_rows(query_row, keys, values, &all, cfg.inv_sqrt_d()))
}

/// Approximate scores from codeword indices: one query-by-codebook product
/// followed by a gather. Never touches key rows, which is the entire point
/// of keeping indices in the fast tier.
pub fn approx_scores(
    post_pe_query: &[f64],
    indices: &CodeIndexVector,
    cb: &Codebook,
) -> Result<Vec<f64>> {
    if post_pe_query.len() != cb.head_dim() {
        return Err(Error::Dimension(format!(
            "query len {} vs codebook dim {}",
            post_pe_query.len(),
            cb.head_dim()
        )));
    }
    let mut table = Vec::with_capacity(cb.size());
    for j in 0..cb.size() {
        table.push(dot(post_pe_query, cb.codeword(j)));
    }
    let mut scores = Vec::with_capacity(indices.len());
    for i in 0..indices.len() {
        let ix = indices.get(i) as usize;
        if ix >= table.len() {
            return Err(Error::IndexOutOfRange {
                index: ix,
                size: table.len(),
            });
        }
        scores.push(table[ix]);
    }
    Ok(scores)
}

/// Exact attention restricted to the selected rows; the softmax
/// renormalizes over the subset.
pub fn selective_attention(
    query_row: &[f64],
    selection: &SelectionResult,
    keys: &Matrix,
    values: &Matrix,
    cfg: &RopeConfig,
) -> Result<Vec<f64>> {
    if selection.selected_indices.is_empty() {
        return Err(Error::Empty("selection".into()));
    }
    if keys.rows() != values.rows() {
        return Err(Error::Dimension(format!(
            "{} keys vs {} values",
            keys.rows(),
            values.rows()
        )));
    }
    if query_row.len() != cfg.head_dim() || keys.cols() != cfg.head_dim() {
        return Err(Error::Dimension(format!(
            "head_dim {} vs query {} / keys {}",
            cfg.head_dim(),
            query_row.len(),
            keys.cols()
        )));
    }
    if let Some(&bad) = selection
        .selected_indices
        .iter()
        .find(|&&ix| ix >= keys.rows())
    {
        return Err(Error::IndexOutOfRange {
            index: bad,
            size: keys.rows(),
        });
    }
    Ok(attend_rows(
        query_row,
        keys,
        values,
        &selection.selected_indices,
        cfg.inv_sqrt_d(),
    ))
}

/// Fraction of the exact top-k recovered by the approximate top-k.
pub fn recall_at_k(approx: &[f64], exact: &[f64], k: usize) -> Result<f64> {
    if approx.len() != exact.len() {
        return Err(Error::Dimension(format!(
            "approx len {} vs exact len {}",
            approx.len(),
            exact.len()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("recall_at_k with k = 0".into()));
    }
    if k > exact.len() {
        return Err(Error::InvalidConfig(format!(
            "k = {k} exceeds {} tokens",
            exact.len()
        )));
    }
    let approx_top = top_k_indices(approx, k);
    let mut in_exact = vec![false; exact.len()];
    for ix in top_k_indices(exact, k) {
        in_exact[ix] = true;
    }
    let hits = approx_top.iter().filter(|&&ix| in_exact[ix]).count();
    Ok(hits as f64 / k as f64)
}
