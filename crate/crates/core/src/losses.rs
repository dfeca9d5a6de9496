//! Neighbor-similarity and contrastive objectives.
//!
//! Every contrastive loss here reduces to a list of [`ContrastTerm`]s over an
//! arena of embeddings: one anchor, one positive and a handful of negatives,
//! scored with cosine similarity and InfoNCE. The standalone operations build
//! terms over vectors they are handed; the trainer builds the same terms over
//! forward-pass instances and reuses the gradient routines below.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NodeKind;
use crate::linalg::{axpy, dot, log_sigmoid, norm, sigmoid};

/// Form of the neighbor-similarity objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NeighborLossForm {
    /// `-ln σ(a·p) - Σ ln σ(-a·n)`.
    #[default]
    Sgns,
    /// `Σ_j [ln σ(a·n_j) - ln σ(a·p)]`, unbounded below.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weights of source neighbor, target neighbor, intra and inter losses.
    pub lambda: [f64; 4],
    pub tau: f64,
    /// Per-kind temperature overrides for the taxonomy and neighbor tasks.
    pub tau_by_kind: BTreeMap<NodeKind, f64>,
    pub negatives: usize,
    pub batch_size: usize,
    /// Positives drawn per aligned anchor for the neighbor-based task.
    pub positives_per_anchor: usize,
    /// Neighbor hops for neighbor-based positives; only 1 is supported.
    pub hops: usize,
    pub neighbor_form: NeighborLossForm,
    /// Individual switches for the three inter-domain tasks.
    pub inter_user: bool,
    pub inter_taxonomy: bool,
    pub inter_neighbor: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: [1.0, 1.0, 1.5, 0.6],
            tau: 1.0,
            tau_by_kind: BTreeMap::new(),
            negatives: 10,
            batch_size: 4096,
            positives_per_anchor: 5,
            hops: 1,
            neighbor_form: NeighborLossForm::Sgns,
            inter_user: true,
            inter_taxonomy: true,
            inter_neighbor: true,
        }
    }
}

impl LossConfig {
    pub fn tau_for(&self, kind: NodeKind) -> f64 {
        self.tau_by_kind.get(&kind).copied().unwrap_or(self.tau)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || self.tau_by_kind.values().any(|&t| !(t > 0.0)) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.negatives < 1 {
            return Err(Error::Config("negatives must be at least 1".into()));
        }
        if self.batch_size < 1 || self.positives_per_anchor < 1 {
            return Err(Error::Config("batch size and positives per anchor must be at least 1".into()));
        }
        if self.hops != 1 {
            return Err(Error::Config("only single-hop neighbor positives are supported".into()));
        }
        if self.lambda.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// A loss value with a flag set when there was nothing to score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub skipped: bool,
}

impl LossValue {
    pub const SKIPPED: LossValue = LossValue { value: 0.0, skipped: true };

    pub fn of(value: f64) -> Self {
        LossValue { value, skipped: false }
    }
}

// ---------------------------------------------------------------------------
// Neighbor similarity

/// One anchor with a positive neighbor and sampled non-neighbors, by arena index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborTerm {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

pub fn neighbor_term_value(a: &[f64], p: &[f64], negs: &[&[f64]], form: NeighborLossForm) -> f64 {
    let pos = dot(a, p);
    match form {
        NeighborLossForm::Sgns => -log_sigmoid(pos) - negs.iter().map(|n| log_sigmoid(-dot(a, n))).sum::<f64>(),
        NeighborLossForm::Literal => negs.iter().map(|n| log_sigmoid(dot(a, n)) - log_sigmoid(pos)).sum(),
    }
}

/// Mean neighbor-similarity loss over anchors, with raw dot products.
pub fn neighbor_similarity_loss<V: AsRef<[f64]>>(
    arena: &[V],
    terms: &[NeighborTerm],
    form: NeighborLossForm,
) -> Result<f64> {
    if terms.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for t in terms {
        let negs: Vec<&[f64]> = t.negatives.iter().map(|&j| arena[j].as_ref()).collect();
        total += neighbor_term_value(arena[t.anchor].as_ref(), arena[t.positive].as_ref(), &negs, form);
    }
    Ok(total / terms.len() as f64)
}

/// Adds `scale · ∂L/∂e` for every vector in the term.
pub(crate) fn neighbor_term_grad<V: AsRef<[f64]>>(
    arena: &[V],
    t: &NeighborTerm,
    form: NeighborLossForm,
    scale: f64,
    grads: &mut [Vec<f64>],
) {
    let a = arena[t.anchor].as_ref();
    let p = arena[t.positive].as_ref();
    let pos = dot(a, p);
    let n_neg = t.negatives.len() as f64;
    let g_pos = match form {
        NeighborLossForm::Sgns => -sigmoid(-pos),
        NeighborLossForm::Literal => -n_neg * sigmoid(-pos),
    } * scale;
    let mut d_anchor = vec![0.0; a.len()];
    axpy(g_pos, p, &mut d_anchor);
    axpy(g_pos, a, &mut grads[t.positive]);
    for &j in &t.negatives {
        let n = arena[j].as_ref();
        let s = dot(a, n);
        let g = match form {
            NeighborLossForm::Sgns => sigmoid(s),
            NeighborLossForm::Literal => sigmoid(-s),
        } * scale;
        axpy(g, n, &mut d_anchor);
        axpy(g, a, &mut grads[j]);
    }
    axpy(1.0, &d_anchor, &mut grads[t.anchor]);
}

// ---------------------------------------------------------------------------
// InfoNCE

/// `-ln softmax(logits)[0]`.
pub fn infonce_logits(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[0]
}

/// InfoNCE from similarities, positive first.
pub fn infonce_sims(sims: &[f64], tau: f64) -> f64 {
    let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    infonce_logits(&logits)
}

pub fn cosine_checked(a: &[f64], b: &[f64]) -> Result<f64> {
    crate::linalg::cosine(a, b).ok_or(Error::ZeroNorm)
}

/// `-ln [exp(sim(a,p)/τ) / (exp(sim(a,p)/τ) + Σ exp(sim(a,n_j)/τ))]` with cosine similarity.
pub fn infonce(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let mut sims = Vec::with_capacity(negatives.len() + 1);
    sims.push(cosine_checked(anchor, positive)?);
    for n in negatives {
        sims.push(cosine_checked(anchor, n)?);
    }
    Ok(infonce_sims(&sims, tau))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastTerm {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
    pub tau: f64,
}

pub fn contrast_term_value<V: AsRef<[f64]>>(arena: &[V], t: &ContrastTerm) -> Result<f64> {
    let negs: Vec<&[f64]> = t.negatives.iter().map(|&j| arena[j].as_ref()).collect();
    infonce(arena[t.anchor].as_ref(), arena[t.positive].as_ref(), &negs, t.tau)
}

/// Mean InfoNCE over terms; skipped when there are none.
pub fn contrastive_mean<V: AsRef<[f64]>>(arena: &[V], terms: &[ContrastTerm]) -> Result<LossValue> {
    if terms.is_empty() {
        return Ok(LossValue::SKIPPED);
    }
    let mut total = 0.0;
    for t in terms {
        total += contrast_term_value(arena, t)?;
    }
    Ok(LossValue::of(total / terms.len() as f64))
}

/// `c = cos(a,b)`, accumulating `g·∂c/∂a` and `g·∂c/∂b`.
fn cosine_backward(a: &[f64], b: &[f64], g: f64, da: &mut [f64], db: &mut [f64]) -> Result<()> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let c = dot(a, b) / (na * nb);
    let inv = g / (na * nb);
    axpy(inv, b, da);
    axpy(-g * c / (na * na), a, da);
    axpy(inv, a, db);
    axpy(-g * c / (nb * nb), b, db);
    Ok(())
}

pub(crate) fn contrast_term_grad<V: AsRef<[f64]>>(
    arena: &[V],
    t: &ContrastTerm,
    scale: f64,
    grads: &mut [Vec<f64>],
) -> Result<()> {
    let a = arena[t.anchor].as_ref();
    let others: Vec<usize> = std::iter::once(t.positive).chain(t.negatives.iter().copied()).collect();
    let mut logits = Vec::with_capacity(others.len());
    for &o in &others {
        logits.push(cosine_checked(a, arena[o].as_ref())? / t.tau);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut d_anchor = vec![0.0; a.len()];
    for (i, &o) in others.iter().enumerate() {
        let g = (exps[i] / z - if i == 0 { 1.0 } else { 0.0 }) / t.tau * scale;
        if g == 0.0 {
            continue;
        }
        let mut d_other = vec![0.0; a.len()];
        cosine_backward(a, arena[o].as_ref(), g, &mut d_anchor, &mut d_other)?;
        axpy(1.0, &d_other, &mut grads[o]);
    }
    axpy(1.0, &d_anchor, &mut grads[t.anchor]);
    Ok(())
}

// ---------------------------------------------------------------------------
// Term builders shared with the trainer

/// Up to `k` distinct entries of `candidates`, uniformly.
pub fn pick_distinct<R: Rng + ?Sized>(rng: &mut R, candidates: &[usize], k: usize) -> Vec<usize> {
    if candidates.len() <= k {
        return candidates.to_vec();
    }
    index::sample(rng, candidates.len(), k).into_iter().map(|i| candidates[i]).collect()
}

/// `k` distinct members of `0..n` other than `exclude`.
pub fn pick_others<R: Rng + ?Sized>(rng: &mut R, n: usize, exclude: usize, k: usize) -> Vec<usize> {
    let k = k.min(n.saturating_sub(1));
    index::sample(rng, n - 1, k)
        .into_iter()
        .map(|i| if i >= exclude { i + 1 } else { i })
        .collect()
}

/// For anchors `0..n` with positives `n..2n` (second views / target sides),
/// negatives are positives of other anchors plus `extra` pool slots `2n..2n+extra`.
pub(crate) fn paired_terms<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    extra: usize,
    negatives: usize,
    tau: f64,
) -> Vec<ContrastTerm> {
    (0..n)
        .map(|i| {
            let pool = n - 1 + extra;
            let picks = index::sample(rng, pool, negatives.min(pool));
            let negatives = picks
                .into_iter()
                .map(|p| if p < n - 1 { n + if p >= i { p + 1 } else { p } } else { 2 * n + (p - (n - 1)) })
                .collect();
            ContrastTerm { anchor: i, positive: n + i, negatives, tau }
        })
        .collect()
}

fn arena_from_pairs<'a>(pairs: &[(&'a [f64], &'a [f64])], extra: &[&'a [f64]]) -> Vec<&'a [f64]> {
    pairs.iter().map(|p| p.0).chain(pairs.iter().map(|p| p.1)).chain(extra.iter().copied()).collect()
}

/// Intra-domain contrast between two neighbor-sample views of each batch node.
/// Negatives are second views of other batch members.
pub fn intra_cl_loss<R: Rng + ?Sized>(
    views: &[(&[f64], &[f64])],
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossValue> {
    if views.is_empty() {
        return Ok(LossValue::SKIPPED);
    }
    if views.len() < cfg.negatives + 1 {
        return Err(Error::BatchTooSmall { batch: views.len(), negatives: cfg.negatives });
    }
    let terms = paired_terms(rng, views.len(), 0, cfg.negatives, cfg.tau);
    contrastive_mean(&arena_from_pairs(views, &[]), &terms)
}

/// User-based inter-domain contrast. `pairs` holds `(source, target)` user
/// embeddings; negatives are other users' target embeddings, drawn from the
/// other pairs and `extra_targets`.
pub fn inter_cl_user<R: Rng + ?Sized>(
    pairs: &[(&[f64], &[f64])],
    extra_targets: &[&[f64]],
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossValue> {
    if pairs.is_empty() || pairs.len() - 1 + extra_targets.len() == 0 {
        return Ok(LossValue::SKIPPED);
    }
    let terms = paired_terms(rng, pairs.len(), extra_targets.len(), cfg.negatives, cfg.tau_for(NodeKind::User));
    contrastive_mean(&arena_from_pairs(pairs, extra_targets), &terms)
}

/// Taxonomy terms for the slots of one kind; kinds with fewer than two
/// members contribute nothing.
pub(crate) fn taxonomy_terms<R: Rng + ?Sized>(
    rng: &mut R,
    kinds: &[NodeKind],
    cfg: &LossConfig,
) -> Vec<ContrastTerm> {
    // Slot i is the source side, slot n+i the target side.
    let n = kinds.len();
    let mut by_kind: BTreeMap<NodeKind, Vec<usize>> = BTreeMap::new();
    for (i, k) in kinds.iter().enumerate() {
        by_kind.entry(*k).or_default().push(i);
    }
    let mut terms = Vec::new();
    for (kind, members) in by_kind {
        if members.len() < 2 {
            continue;
        }
        let tau = cfg.tau_for(kind);
        for (pos, &i) in members.iter().enumerate() {
            let negatives =
                pick_others(rng, members.len(), pos, cfg.negatives).into_iter().map(|j| n + members[j]).collect();
            terms.push(ContrastTerm { anchor: i, positive: n + i, negatives, tau });
        }
    }
    terms
}

/// Taxonomy-based inter-domain contrast over aligned tags, categories and
/// words. Negatives come only from aligned taxonomies of the same kind.
pub fn inter_cl_taxonomy<R: Rng + ?Sized>(
    aligned: &[(NodeKind, &[f64], &[f64])],
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossValue> {
    let kinds: Vec<NodeKind> = aligned.iter().map(|a| a.0).collect();
    let terms = taxonomy_terms(rng, &kinds, cfg);
    let arena: Vec<&[f64]> = aligned.iter().map(|a| a.1).chain(aligned.iter().map(|a| a.2)).collect();
    contrastive_mean(&arena, &terms)
}

/// An aligned node for the neighbor-based task: its source embedding, the
/// target-pool indices of its target-domain neighbors, and pool indices that
/// may never serve as negatives (its neighbors and its own counterpart).
#[derive(Debug, Clone)]
pub struct NeighborAnchor<'a> {
    pub source: &'a [f64],
    pub neighbors: Vec<usize>,
    pub excluded: Vec<usize>,
}

/// Neighbor-based terms. `anchors[i]` lists the pool entries that are
/// neighbors of anchor `i`; `excluded(i, j)` says pool entry `j` may not be a
/// negative for anchor `i`. `pool_kinds[j]` is the kind of pool entry `j`.
/// Anchors occupy arena slots `0..anchors`, pool entry `j` slot `anchors + j`.
pub(crate) fn neighbor_terms<R: Rng + ?Sized>(
    rng: &mut R,
    anchors: &[Vec<usize>],
    pool_kinds: &[NodeKind],
    cfg: &LossConfig,
    excluded: impl Fn(usize, usize) -> bool,
) -> Vec<ContrastTerm> {
    let offset = anchors.len();
    let mut by_kind: BTreeMap<NodeKind, Vec<usize>> = BTreeMap::new();
    for (j, k) in pool_kinds.iter().enumerate() {
        by_kind.entry(*k).or_default().push(j);
    }
    let mut terms = Vec::new();
    for (i, neighbors) in anchors.iter().enumerate() {
        if neighbors.is_empty() {
            continue;
        }
        for &k in &pick_distinct(rng, neighbors, cfg.positives_per_anchor) {
            let kind = pool_kinds[k];
            let same = &by_kind[&kind];
            let mut negatives = Vec::with_capacity(cfg.negatives);
            // Rejection sampling against the exclusion list, bounded.
            let mut attempts = 0;
            while negatives.len() < cfg.negatives && attempts < cfg.negatives * 20 {
                attempts += 1;
                let j = same[rng.gen_range(0..same.len())];
                if !excluded(i, j) && !negatives.contains(&(offset + j)) {
                    negatives.push(offset + j);
                }
            }
            if negatives.is_empty() {
                continue;
            }
            terms.push(ContrastTerm { anchor: i, positive: offset + k, negatives, tau: cfg.tau_for(kind) });
        }
    }
    terms
}

/// Neighbor-based inter-domain contrast: each aligned node's source
/// embedding against its target-domain neighbors, with same-kind target
/// non-neighbors as negatives. Averaged over (anchor, positive) pairs.
pub fn inter_cl_neighbor<R: Rng + ?Sized>(
    anchors: &[NeighborAnchor<'_>],
    target_pool: &[(NodeKind, &[f64])],
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossValue> {
    let index: Vec<Vec<usize>> = anchors.iter().map(|a| a.neighbors.clone()).collect();
    let kinds: Vec<NodeKind> = target_pool.iter().map(|p| p.0).collect();
    let excluded = |i: usize, j: usize| anchors[i].neighbors.contains(&j) || anchors[i].excluded.contains(&j);
    let terms = neighbor_terms(rng, &index, &kinds, cfg, excluded);
    let arena: Vec<&[f64]> = anchors.iter().map(|a| a.source).chain(target_pool.iter().map(|p| p.1)).collect();
    contrastive_mean(&arena, &terms)
}

/// The three inter-domain losses and their unit-weight sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterLosses {
    pub user: LossValue,
    pub taxonomy: LossValue,
    pub neighbor: LossValue,
}

pub fn inter_cl_total(parts: &InterLosses) -> f64 {
    parts.user.value + parts.taxonomy.value + parts.neighbor.value
}

pub fn total_loss(l_ns: f64, l_nt: f64, l_intra: f64, l_inter: f64, cfg: &LossConfig) -> f64 {
    let [l1, l2, l3, l4] = cfg.lambda;
    l1 * l_ns + l2 * l_nt + l3 * l_intra + l4 * l_inter
}
