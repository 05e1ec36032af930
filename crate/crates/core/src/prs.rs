//! Attention pooling, the patch-wise relevance score and its binary loss,
//! plus positive/negative assembly from the patch pool.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{attention_probs, Graph, Mask, Var, PROB_EPS};
use crate::math::ln;
use crate::nn::Linear;
use crate::params::{Group, Init, ParamId, ParamStore};
use crate::patching::{PatchPool, PatchPoolEntry, PoolFilter};
use crate::tensor::cosine;
use crate::{bail, Result};

/// Single-query, single-head attention pooling with a learned query token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionPool {
    pub query: ParamId,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl AttentionPool {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        Self {
            query: store.add("pool.query", Group::AttnPool, 1, d, Init::Normal(0.5), rng),
            q: Linear::new(store, "pool.q", Group::AttnPool, d, d, rng),
            k: Linear::new(store, "pool.k", Group::AttnPool, d, d, rng),
            v: Linear::new(store, "pool.v", Group::AttnPool, d, d, rng),
        }
    }

    /// `z_ct = softmax(Q K^T / sqrt(d)) V`, a `1 x d` row.
    pub fn forward(&self, g: &mut Graph<'_>, z: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, z)?.0)
    }

    /// Pooled token together with the attention weight of every row.
    pub fn forward_with_weights(&self, g: &mut Graph<'_>, z: Var) -> Result<(Var, Vec<f64>)> {
        if g.value(z).rows == 0 {
            bail!(Shape, "attention pooling over zero patches");
        }
        let query = g.param(self.query);
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, z)?;
        let v = self.v.forward(g, z)?;
        let w = attention_probs(g.value(q), g.value(k), 1, &Mask::None)
            .remove(0)
            .data;
        Ok((g.attention(q, k, v, 1, &Mask::None)?, w))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextToken {
    pub z_ct: Vec<f64>,
    pub source_image: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrsExample {
    pub z_ct: ContextToken,
    pub pool_entry: PatchPoolEntry,
    pub label: bool,
}

impl PrsExample {
    pub fn new(z_ct: ContextToken, pool_entry: PatchPoolEntry) -> Self {
        let label = pool_entry.image_id == z_ct.source_image;
        Self {
            z_ct,
            pool_entry,
            label,
        }
    }
}

/// `H = clamp((1 + cos) / 2, 1e-7, 1 - 1e-7)`.
pub fn relevance_from_cosine(c: f64) -> f64 {
    (0.5 * (1.0 + c)).clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub fn relevance_score(z_ct: &[f64], z_p: &[f64]) -> Result<f64> {
    if z_ct.len() != z_p.len() {
        bail!(Shape, "relevance of {} vs {} dims", z_ct.len(), z_p.len());
    }
    match cosine(z_ct, z_p) {
        Some(c) => Ok(relevance_from_cosine(c)),
        None => bail!(Invalid, "relevance score of a zero vector"),
    }
}

/// Binary cross-entropy term for one clamped score.
pub fn prs_term(h: f64, positive: bool) -> f64 {
    let h = h.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if positive {
        -ln(h)
    } else {
        -ln(1.0 - h)
    }
}

/// Mean loss over `(score, label)` pairs.
pub fn prs_loss(scored: &[(f64, bool)]) -> Result<f64> {
    if scored.is_empty() {
        bail!(Invalid, "relevance loss over an empty batch");
    }
    Ok(scored.iter().map(|&(h, y)| prs_term(h, y)).sum::<f64>() / scored.len() as f64)
}

/// One assembled pair: the anchor's position in the batch and a pool entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrsPair {
    pub anchor: usize,
    pub entry: usize,
    pub label: bool,
}

/// For each anchor image draw `k_pos` of its own held-out patches and
/// `k_neg` patches of other images, uniformly without replacement.
pub fn assemble_prs_batch<R: Rng + ?Sized>(
    anchors: &[&str],
    pool: &PatchPool,
    k_pos: usize,
    k_neg: usize,
    rng: &mut R,
) -> Result<Vec<PrsPair>> {
    let mut out = Vec::with_capacity(anchors.len() * (k_pos + k_neg));
    for (a, &id) in anchors.iter().enumerate() {
        let own = pool.eligible(PoolFilter::Only(id));
        if own < k_pos {
            bail!(
                Insufficient,
                "positives for {id}: requested {k_pos} but only {own} own entries"
            );
        }
        let foreign = pool.eligible(PoolFilter::Exclude(id));
        if foreign < k_neg {
            bail!(
                Insufficient,
                "negatives for {id}: requested {k_neg} but only {foreign} foreign entries"
            );
        }
        for e in pool.draw_indices(k_pos, PoolFilter::Only(id), rng)? {
            out.push(PrsPair {
                anchor: a,
                entry: e,
                label: true,
            });
        }
        for e in pool.draw_indices(k_neg, PoolFilter::Exclude(id), rng)? {
            out.push(PrsPair {
                anchor: a,
                entry: e,
                label: false,
            });
        }
    }
    Ok(out)
}

/// Graph form of the loss: `z_ct` holds one pooled row per anchor, `z_p`
/// one encoded row per pair.
pub fn prs_loss_graph(g: &mut Graph<'_>, z_ct: Var, z_p: Var, pairs: &[PrsPair]) -> Result<Var> {
    if pairs.is_empty() {
        bail!(Invalid, "relevance loss over an empty batch");
    }
    let anchors: Vec<usize> = pairs.iter().map(|p| p.anchor).collect();
    let labels: Vec<f64> = pairs.iter().map(|p| if p.label { 1.0 } else { 0.0 }).collect();
    let a = g.select_rows(z_ct, &anchors)?;
    let c = g.cosine_rows(a, z_p)?;
    g.bce_from_cosine(c, &labels)
}

/// Probability that a random positive outranks a random negative; ties
/// count one half.
pub fn auc(pos: &[f64], neg: &[f64]) -> Option<f64> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // rank-sum with average ranks for ties
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|x| x.1).count() as f64 * avg;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}
