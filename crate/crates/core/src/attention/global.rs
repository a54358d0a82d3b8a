//! Global positional/structural attention, differentiable hard sampling of
//! long-range pairs, and aggregation restricted to the sampled pairs.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::attention::PairSet;
use crate::autograd::Tensor;
use crate::error::{DegtaError, Result};
use crate::graph::Graph;
use crate::linalg::Matrix;

/// Learnable weights of one global triple-attention block. `view_logits` is
/// `1 x 3` in `[positional, structural, attribute]` order.
#[derive(Debug, Clone)]
pub struct GlobalAttentionParams<T> {
    pub w_s_q: T,
    pub w_s_k: T,
    pub w_p_q: T,
    pub w_p_k: T,
    pub w_a_q: T,
    pub w_a_k: T,
    pub view_logits: T,
}

impl<T> GlobalAttentionParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> GlobalAttentionParams<U> {
        GlobalAttentionParams {
            w_s_q: f(&self.w_s_q),
            w_s_k: f(&self.w_s_k),
            w_p_q: f(&self.w_p_q),
            w_p_k: f(&self.w_p_k),
            w_a_q: f(&self.w_a_q),
            w_a_k: f(&self.w_a_k),
            view_logits: f(&self.view_logits),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'static str, &'a T)) {
        f("w_s_q", &self.w_s_q);
        f("w_s_k", &self.w_s_k);
        f("w_p_q", &self.w_p_q);
        f("w_p_k", &self.w_p_k);
        f("w_a_q", &self.w_a_q);
        f("w_a_k", &self.w_a_k);
        f("view_logits", &self.view_logits);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&'static str, &mut T)) {
        f("w_s_q", &mut self.w_s_q);
        f("w_s_k", &mut self.w_s_k);
        f("w_p_q", &mut self.w_p_q);
        f("w_p_k", &mut self.w_p_k);
        f("w_a_q", &mut self.w_a_q);
        f("w_a_k", &mut self.w_a_k);
        f("view_logits", &mut self.view_logits);
    }
}

/// How long-range pairs are selected from the sampling scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    /// Per row, the `k` largest scores among candidates (ties broken by
    /// lower column index).
    TopK { k: usize },
    /// Scores above `tau`; `None` uses the per-row default `2 / #candidates`.
    Threshold { tau: Option<f64> },
}

impl SamplingStrategy {
    pub fn validate(&self) -> Result<()> {
        match self {
            SamplingStrategy::TopK { k } if *k < 1 => Err(DegtaError::InvalidParameter(
                "topk sampling requires k >= 1".into(),
            )),
            SamplingStrategy::Threshold { tau: Some(t) } if !(*t > 0.0 && *t < 1.0) => Err(
                DegtaError::InvalidParameter(format!("threshold tau must lie in (0,1), got {t}")),
            ),
            _ => Ok(()),
        }
    }
}

/// The sampling candidate set `1 - A - I`: non-neighbors excluding self,
/// as a dense 0/1 mask plus per-row index lists.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub mask: Rc<Matrix>,
    pub lists: Vec<Vec<usize>>,
}

impl CandidateSet {
    pub fn num_rows(&self) -> usize {
        self.lists.len()
    }
}

pub fn candidate_set(g: &Graph) -> CandidateSet {
    let n = g.num_nodes();
    let mut mask = Matrix::zeros(n, n);
    let mut lists = vec![Vec::new(); n];
    for i in 0..n {
        let nbrs = g.neighbors(i);
        let mut cursor = 0usize;
        for j in 0..n {
            while cursor < nbrs.len() && nbrs[cursor] < j {
                cursor += 1;
            }
            if j == i || (cursor < nbrs.len() && nbrs[cursor] == j) {
                continue;
            }
            mask[(i, j)] = 1.0;
            lists[i].push(j);
        }
    }
    CandidateSet {
        mask: Rc::new(mask),
        lists,
    }
}

/// Transformer-style global view attention:
/// `U = row_softmax(Q K^T / sqrt(width))` for the structural and positional
/// encodings.
pub fn global_view_attention(
    s_enc: &Tensor,
    p_enc: &Tensor,
    params: &GlobalAttentionParams<Tensor>,
) -> Result<(Tensor, Tensor)> {
    let view = |x: &Tensor, wq: &Tensor, wk: &Tensor| -> Result<Tensor> {
        let q = x.matmul(wq)?;
        let k = x.matmul(wk)?;
        let scale = 1.0 / (x.cols() as f64).sqrt();
        q.scaled_attention(&k, scale)
    };
    let u_s = view(s_enc, &params.w_s_q, &params.w_s_k)?;
    let u_p = view(p_enc, &params.w_p_q, &params.w_p_k)?;
    Ok((u_s, u_p))
}

/// Sampling scores: masked row softmax of `α U_s + β U_p` over candidates.
/// `weights` is the softmaxed global view triple; only its positional and
/// structural components participate. Rows without candidates come back
/// all-zero and flagged.
pub fn sample_scores(
    u_s: &Tensor,
    u_p: &Tensor,
    candidates: &CandidateSet,
    weights: &Tensor,
) -> Result<(Tensor, Vec<bool>)> {
    let w_pos = weights.gather_entries(&[(0, 0)])?;
    let w_str = weights.gather_entries(&[(0, 1)])?;
    u_s.weighted_masked_softmax(u_p, &w_str, &w_pos, Rc::clone(&candidates.mask))
}

/// The sampled long-range topology.
pub struct GlobalSampleMask {
    /// `N x N` tensor; forward values are binary in {0,1}, zero on the
    /// diagonal and on existing edges. Gradients pass through unchanged.
    pub mask: Tensor,
    /// Sampled pairs grouped by source node.
    pub pairs: PairSet,
    /// Rows with no sampled pair.
    pub empty: Vec<bool>,
}

/// Differentiable hard sampling: forward-binary selection of long-range
/// pairs (`1_{M>τ} - stopgrad(M) + M`), identity gradient.
///
/// On a soft-surrogate tape the mask keeps the smooth scores and the pair
/// set widens to every candidate, so gradient checks differentiate a smooth
/// function.
pub fn sample(
    m: &Tensor,
    candidates: &CandidateSet,
    strategy: SamplingStrategy,
) -> Result<GlobalSampleMask> {
    strategy.validate()?;
    let values = m.value_rc();
    let (n, cols) = values.shape();
    let mut indicator = Matrix::zeros(n, cols);
    let mut lists: Vec<Vec<usize>> = vec![Vec::new(); n];

    for i in 0..n {
        let cand = &candidates.lists[i];
        if cand.is_empty() {
            continue;
        }
        match strategy {
            SamplingStrategy::TopK { k } => {
                let mut order = cand.clone();
                let take = k.min(cand.len());
                let row = values.row(i);
                let by_score_then_col =
                    |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
                if take < order.len() {
                    order.select_nth_unstable_by(take - 1, by_score_then_col);
                    order.truncate(take);
                }
                order.sort_unstable();
                for &j in &order {
                    indicator[(i, j)] = 1.0;
                }
                lists[i] = order;
            }
            SamplingStrategy::Threshold { tau } => {
                let t = tau.unwrap_or(2.0 / cand.len() as f64);
                for &j in cand {
                    if values[(i, j)] > t {
                        indicator[(i, j)] = 1.0;
                        lists[i].push(j);
                    }
                }
            }
        }
    }

    if m.tape().soft_ste() {
        lists.clone_from(&candidates.lists);
    }
    let pairs = PairSet::from_lists(&lists);
    let empty: Vec<bool> = lists.iter().map(|l| l.is_empty()).collect();
    let mask = m.straight_through_with(indicator);
    Ok(GlobalSampleMask { mask, pairs, empty })
}

/// Attribute attention restricted to the sampled pairs: the `Q K^T / sqrt(d)`
/// logits are computed per pair (never as a full `N x N` matrix) and
/// softmaxed within each source's sampled set.
pub fn sampled_attribute_attention(
    h_enc: &Tensor,
    pairs: &PairSet,
    params: &GlobalAttentionParams<Tensor>,
) -> Result<Tensor> {
    let q = h_enc.matmul(&params.w_a_q)?;
    let k = h_enc.matmul(&params.w_a_k)?;
    let qi = q.gather_rows(&pairs.src)?;
    let kj = k.gather_rows(&pairs.dst)?;
    let scale = 1.0 / (h_enc.cols() as f64).sqrt();
    let logits = qi.mul(&kj)?.row_sums().scale(scale);
    logits.segment_softmax(&pairs.offsets)
}

/// Combines view attentions over the sampled pairs, normalizes per source,
/// and aggregates attribute encodings. Nodes with an empty sampled set get
/// a zero row. Returns `(aggregate, ẑ per pair)`.
pub fn global_aggregate(
    u_s: &Tensor,
    u_p: &Tensor,
    u_a: &Tensor,
    mask: &GlobalSampleMask,
    h_enc: &Tensor,
    weights: &Tensor,
    dropout: Option<&Matrix>,
) -> Result<(Tensor, Tensor)> {
    let pair_idx = mask.pairs.pairs();
    let us = u_s.gather_entries(&pair_idx)?;
    let up = u_p.gather_entries(&pair_idx)?;
    let stacked = up.concat_cols(&us)?.concat_cols(u_a)?;
    let z = stacked.matmul(&weights.transpose())?;
    let zhat = z.segment_softmax(&mask.pairs.offsets)?;
    // Multiplying by the mask values (1 on sampled pairs in the forward)
    // routes gradient through the straight-through estimator into the
    // sampling scores.
    let gate = mask.mask.gather_entries(&pair_idx)?;
    let mut weighted = zhat.mul(&gate)?;
    if let Some(keep) = dropout {
        weighted = weighted.mul(&z.tape().constant(keep.clone()))?;
    }
    let hj = h_enc.gather_rows(&mask.pairs.dst)?;
    let agg = hj.mul(&weighted)?.scatter_add_rows(&mask.pairs.src, h_enc.rows())?;
    Ok((agg, zhat))
}

/// Dense global aggregation baseline: attention over all non-self pairs
/// with no sampling. Returns `(aggregate, ẑ per pair, pairs)`.
pub fn dense_global_aggregate(
    u_s: &Tensor,
    u_p: &Tensor,
    h_enc: &Tensor,
    params: &GlobalAttentionParams<Tensor>,
    weights: &Tensor,
) -> Result<(Tensor, Tensor, PairSet)> {
    let n = h_enc.rows();
    let lists: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i).collect())
        .collect();
    let pairs = PairSet::from_lists(&lists);
    let u_a = sampled_attribute_attention(h_enc, &pairs, params)?;
    let pair_idx = pairs.pairs();
    let us = u_s.gather_entries(&pair_idx)?;
    let up = u_p.gather_entries(&pair_idx)?;
    let stacked = up.concat_cols(&us)?.concat_cols(&u_a)?;
    let z = stacked.matmul(&weights.transpose())?;
    let zhat = z.segment_softmax(&pairs.offsets)?;
    let hj = h_enc.gather_rows(&pairs.dst)?;
    let agg = hj.mul(&zhat)?.scatter_add_rows(&pairs.src, n)?;
    Ok((agg, zhat, pairs))
}
