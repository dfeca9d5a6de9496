//! Multi-task training: step planning, exact reverse-mode gradients through
//! the encoders and every loss, clipping, and Adam/SGD updates.
//!
//! A training step is split into three phases. [`build_plan`] draws every
//! batch, positive, negative and neighborhood sample from seeded streams;
//! [`evaluate`] runs forward passes and losses (and optionally the backward
//! pass) for a fixed plan; the optimizer then applies the gradients. Keeping
//! the plan fixed is what makes finite-difference checking possible.

use std::hash::Hasher;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{backward_sample, forward_traced, project_all, EncoderGrads, ForwardTrace, NeighborhoodSample};
use crate::error::{Error, Result};
use crate::graph::{AlignedNodeSet, AlignedPair, Domain, Network, NodeId, NodeKind};
use crate::linalg::Matrix;
use crate::losses::{
    contrast_term_grad, contrastive_mean, neighbor_similarity_loss, neighbor_term_grad, neighbor_terms,
    paired_terms, taxonomy_terms, ContrastTerm, LossConfig, LossValue, NeighborTerm,
};
use crate::model::{DomainEncoder, Model, ModelConfig};
use crate::rng;

/// The six loss families, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossFamily {
    NeighborSource,
    NeighborTarget,
    Intra,
    InterUser,
    InterTaxonomy,
    InterNeighbor,
}

impl LossFamily {
    pub const ALL: [LossFamily; 6] = [
        LossFamily::NeighborSource,
        LossFamily::NeighborTarget,
        LossFamily::Intra,
        LossFamily::InterUser,
        LossFamily::InterTaxonomy,
        LossFamily::InterNeighbor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossFamily::NeighborSource => "L_Ns",
            LossFamily::NeighborTarget => "L_Nt",
            LossFamily::Intra => "L_intra",
            LossFamily::InterUser => "L_inter_u",
            LossFamily::InterTaxonomy => "L_inter_t",
            LossFamily::InterNeighbor => "L_inter_n",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Effective weight of each family in the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights(pub [f64; 6]);

impl LossWeights {
    /// `λ₁ L_Ns + λ₂ L_Nt + λ₃ L_intra + λ₄ (L_inter_u + L_inter_t + L_inter_n)`,
    /// with individually disabled inter tasks zeroed.
    pub fn from_config(cfg: &LossConfig, strict_cold_start: bool) -> Self {
        let [l1, l2, l3, l4] = cfg.lambda;
        let on = |b: bool| if b { l4 } else { 0.0 };
        LossWeights([l1, l2, l3, on(cfg.inter_user && !strict_cold_start), on(cfg.inter_taxonomy), on(cfg.inter_neighbor)])
    }

    pub fn only(family: LossFamily) -> Self {
        let mut w = [0.0; 6];
        w[family.index()] = 1.0;
        LossWeights(w)
    }

    pub fn get(&self, family: LossFamily) -> f64 {
        self.0[family.index()]
    }
}

/// Loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub parts: [LossValue; 6],
    pub total: f64,
}

impl StepLosses {
    pub fn get(&self, family: LossFamily) -> LossValue {
        self.parts[family.index()]
    }

    pub fn weighted(&self, weights: &LossWeights) -> f64 {
        self.parts.iter().zip(weights.0).map(|(p, w)| if w == 0.0 { 0.0 } else { w * p.value }).sum()
    }
}

/// One line of the loss-history stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(rename = "L_Ns")]
    pub l_ns: f64,
    #[serde(rename = "L_Nt")]
    pub l_nt: f64,
    #[serde(rename = "L_intra")]
    pub l_intra: f64,
    #[serde(rename = "L_inter_u")]
    pub l_inter_u: f64,
    #[serde(rename = "L_inter_t")]
    pub l_inter_t: f64,
    #[serde(rename = "L_inter_n")]
    pub l_inter_n: f64,
    pub total: f64,
}

impl StepRecord {
    pub fn new(step: usize, l: &StepLosses) -> Self {
        let v = |f: LossFamily| l.get(f).value;
        StepRecord {
            step,
            l_ns: v(LossFamily::NeighborSource),
            l_nt: v(LossFamily::NeighborTarget),
            l_intra: v(LossFamily::Intra),
            l_inter_u: v(LossFamily::InterUser),
            l_inter_t: v(LossFamily::InterTaxonomy),
            l_inter_n: v(LossFamily::InterNeighbor),
            total: l.total,
        }
    }
}

/// Read-only view of both networks and the eligible node sets of each task.
#[derive(Debug, Clone)]
pub struct TrainContext<'a> {
    pub nets: [&'a Network; 2],
    connected: [Vec<NodeId>; 2],
    users: Vec<AlignedPair>,
    taxonomies: Vec<AlignedPair>,
    neighbor_anchors: Vec<AlignedPair>,
}

impl<'a> TrainContext<'a> {
    pub fn new(source: &'a Network, target: &'a Network, aligned: &AlignedNodeSet) -> Self {
        let pairs = aligned.resolve(source, target);
        let users = pairs
            .iter()
            .filter(|p| p.kind == NodeKind::User && source.degree(p.source) > 0 && target.degree(p.target) > 0)
            .copied()
            .collect();
        let taxonomies = pairs
            .iter()
            .filter(|p| matches!(p.kind, NodeKind::Tag | NodeKind::Category | NodeKind::Word))
            .copied()
            .collect();
        let neighbor_anchors = pairs.iter().filter(|p| target.degree(p.target) > 0).copied().collect();
        TrainContext {
            nets: [source, target],
            connected: [source.connected_nodes(), target.connected_nodes()],
            users,
            taxonomies,
            neighbor_anchors,
        }
    }

    pub fn net(&self, d: Domain) -> &'a Network {
        self.nets[d.index()]
    }

    /// Aligned users with behavior edges in both domains.
    pub fn eligible_users(&self) -> &[AlignedPair] {
        &self.users
    }
}

#[derive(Debug, Clone)]
struct Instance {
    domain: Domain,
    sample: NeighborhoodSample,
}

/// Everything sampled for one step; a pure function of (seed, step).
#[derive(Debug, Clone, Default)]
pub struct StepPlan {
    instances: Vec<Instance>,
    neighbor: [Vec<NeighborTerm>; 2],
    contrast: [Vec<ContrastTerm>; 4],
}

impl StepPlan {
    pub fn instance_count(&self) -> usize {
        self.instances.len()
    }

    /// Number of scored terms for a family.
    pub fn term_count(&self, family: LossFamily) -> usize {
        match family {
            LossFamily::NeighborSource => self.neighbor[0].len(),
            LossFamily::NeighborTarget => self.neighbor[1].len(),
            f => self.contrast[f.index() - 2].len(),
        }
    }

    /// True if any forward pass of this plan reads node `n` of domain `d`.
    pub fn touches(&self, d: Domain, n: NodeId) -> bool {
        self.instances.iter().filter(|i| i.domain == d).any(|i| i.sample.touched().any(|t| t == n))
    }

    fn push<R: Rng + ?Sized>(&mut self, net: &Network, node: NodeId, cfg: &ModelConfig, rng: &mut R) -> usize {
        let sample = NeighborhoodSample::draw(net, node, cfg.fanouts, rng, 0);
        self.instances.push(Instance { domain: net.domain(), sample });
        self.instances.len() - 1
    }
}

const PLAN_STREAM: u64 = 0x51a9;

fn sample_batch<R: Rng + ?Sized, T: Copy>(rng: &mut R, items: &[T], batch: usize) -> Vec<T> {
    let k = batch.min(items.len());
    index::sample(rng, items.len(), k).into_iter().map(|i| items[i]).collect()
}

/// Draws batches, positives, negatives and neighborhoods for every family
/// with non-zero weight.
pub fn build_plan(
    ctx: &TrainContext<'_>,
    model: &ModelConfig,
    loss: &LossConfig,
    weights: &LossWeights,
    seed: u64,
    step: u64,
) -> StepPlan {
    let mut plan = StepPlan::default();
    for family in LossFamily::ALL {
        if weights.get(family) == 0.0 {
            continue;
        }
        let mut r = rng::stream(seed, &[PLAN_STREAM, step, family.index() as u64]);
        match family {
            LossFamily::NeighborSource => plan_neighbor(&mut plan, ctx, Domain::Source, model, loss, &mut r),
            LossFamily::NeighborTarget => plan_neighbor(&mut plan, ctx, Domain::Target, model, loss, &mut r),
            LossFamily::Intra => plan_intra(&mut plan, ctx, model, loss, &mut r),
            LossFamily::InterUser => plan_inter_user(&mut plan, ctx, model, loss, &mut r),
            LossFamily::InterTaxonomy => plan_inter_taxonomy(&mut plan, ctx, model, loss, &mut r),
            LossFamily::InterNeighbor => plan_inter_neighbor(&mut plan, ctx, model, loss, &mut r),
        }
    }
    plan
}

fn plan_neighbor<R: Rng>(
    plan: &mut StepPlan,
    ctx: &TrainContext<'_>,
    domain: Domain,
    model: &ModelConfig,
    loss: &LossConfig,
    rng: &mut R,
) {
    let net = ctx.net(domain);
    let anchors = sample_batch(rng, &ctx.connected[domain.index()], loss.batch_size);
    let mut terms = Vec::with_capacity(anchors.len());
    for a in anchors {
        let Some(p) = net.sample_one_neighbor(a, rng) else { continue };
        let mut negs = Vec::with_capacity(loss.negatives);
        let mut attempts = 0;
        while negs.len() < loss.negatives && attempts < 20 * loss.negatives {
            attempts += 1;
            let j = NodeId(rng.gen_range(0..net.len() as u32));
            if j != a && !net.is_neighbor(a, j) {
                negs.push(j);
            }
        }
        if negs.is_empty() {
            continue;
        }
        let anchor = plan.push(net, a, model, rng);
        let positive = plan.push(net, p, model, rng);
        let negatives = negs.into_iter().map(|j| plan.push(net, j, model, rng)).collect();
        terms.push(NeighborTerm { anchor, positive, negatives });
    }
    plan.neighbor[domain.index()] = terms;
}

fn remap(terms: Vec<ContrastTerm>, slots: &[usize]) -> Vec<ContrastTerm> {
    terms
        .into_iter()
        .map(|t| ContrastTerm {
            anchor: slots[t.anchor],
            positive: slots[t.positive],
            negatives: t.negatives.iter().map(|&j| slots[j]).collect(),
            tau: t.tau,
        })
        .collect()
}

fn plan_intra<R: Rng>(plan: &mut StepPlan, ctx: &TrainContext<'_>, model: &ModelConfig, loss: &LossConfig, rng: &mut R) {
    let net = ctx.net(Domain::Target);
    let nodes = sample_batch(rng, &ctx.connected[Domain::Target.index()], loss.batch_size);
    if nodes.len() < 2 {
        return;
    }
    let mut slots: Vec<usize> = nodes.iter().map(|&n| plan.push(net, n, model, rng)).collect();
    slots.extend(nodes.iter().map(|&n| plan.push(net, n, model, rng)).collect::<Vec<_>>());
    let terms = paired_terms(rng, nodes.len(), 0, loss.negatives, loss.tau);
    plan.contrast[0] = remap(terms, &slots);
}

fn plan_pairs<R: Rng>(
    plan: &mut StepPlan,
    ctx: &TrainContext<'_>,
    pairs: &[AlignedPair],
    model: &ModelConfig,
    rng: &mut R,
) -> Vec<usize> {
    let (s, t) = (ctx.net(Domain::Source), ctx.net(Domain::Target));
    let mut slots: Vec<usize> = pairs.iter().map(|p| plan.push(s, p.source, model, rng)).collect();
    slots.extend(pairs.iter().map(|p| plan.push(t, p.target, model, rng)).collect::<Vec<_>>());
    slots
}

fn plan_inter_user<R: Rng>(
    plan: &mut StepPlan,
    ctx: &TrainContext<'_>,
    model: &ModelConfig,
    loss: &LossConfig,
    rng: &mut R,
) {
    let pairs = sample_batch(rng, &ctx.users, loss.batch_size);
    if pairs.len() < 2 {
        return;
    }
    let slots = plan_pairs(plan, ctx, &pairs, model, rng);
    let terms = paired_terms(rng, pairs.len(), 0, loss.negatives, loss.tau_for(NodeKind::User));
    plan.contrast[1] = remap(terms, &slots);
}

fn plan_inter_taxonomy<R: Rng>(
    plan: &mut StepPlan,
    ctx: &TrainContext<'_>,
    model: &ModelConfig,
    loss: &LossConfig,
    rng: &mut R,
) {
    let pairs = sample_batch(rng, &ctx.taxonomies, loss.batch_size);
    let kinds: Vec<NodeKind> = pairs.iter().map(|p| p.kind).collect();
    let terms = taxonomy_terms(rng, &kinds, loss);
    if terms.is_empty() {
        return;
    }
    let slots = plan_pairs(plan, ctx, &pairs, model, rng);
    plan.contrast[2] = remap(terms, &slots);
}

fn plan_inter_neighbor<R: Rng>(
    plan: &mut StepPlan,
    ctx: &TrainContext<'_>,
    model: &ModelConfig,
    loss: &LossConfig,
    rng: &mut R,
) {
    let (s, t) = (ctx.net(Domain::Source), ctx.net(Domain::Target));
    let anchors = sample_batch(rng, &ctx.neighbor_anchors, loss.batch_size);
    if anchors.is_empty() {
        return;
    }
    let mut slots: Vec<usize> = Vec::new();
    for a in &anchors {
        slots.push(plan.push(s, a.source, model, rng));
    }
    // In-batch pool: every anchor's sampled target neighbors.
    let mut pool_nodes: Vec<NodeId> = Vec::new();
    let mut own: Vec<Vec<usize>> = Vec::with_capacity(anchors.len());
    for a in &anchors {
        let nbrs: Vec<usize> = t.neighbors(a.target).iter().map(|x| x.node.ix()).collect();
        let picked = crate::losses::pick_distinct(rng, &nbrs, loss.positives_per_anchor);
        let mut mine = Vec::with_capacity(picked.len());
        for k in picked {
            mine.push(pool_nodes.len());
            pool_nodes.push(NodeId(k as u32));
        }
        own.push(mine);
    }
    for &n in &pool_nodes {
        slots.push(plan.push(t, n, model, rng));
    }
    let pool_kinds: Vec<NodeKind> = pool_nodes.iter().map(|&n| t.kind(n)).collect();
    let anchor_targets: Vec<NodeId> = anchors.iter().map(|a| a.target).collect();
    let excluded = |i: usize, j: usize| {
        let node = pool_nodes[j];
        node == anchor_targets[i] || t.is_neighbor(anchor_targets[i], node)
    };
    let terms = neighbor_terms(rng, &own, &pool_kinds, loss, excluded);
    plan.contrast[3] = remap(terms, &slots);
}

/// Gradients for both domains' encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub domains: [EncoderGrads; 2],
}

impl GradientSet {
    pub fn zeros(model: &Model, nets: [&Network; 2]) -> Self {
        let c = &model.config;
        GradientSet {
            domains: [
                EncoderGrads::zeros(nets[0].len(), c.d_in, c.hidden, c.d_out),
                EncoderGrads::zeros(nets[1].len(), c.d_in, c.hidden, c.d_out),
            ],
        }
    }

    pub fn domain(&self, d: Domain) -> &EncoderGrads {
        &self.domains[d.index()]
    }

    /// Gradient norm over one domain's parameters.
    pub fn norm(&self, d: Domain) -> f64 {
        self.domains[d.index()].squared_norm().sqrt()
    }

    /// Rescales each domain's gradient to norm at most `max_norm`.
    pub fn clip(&mut self, max_norm: f64) {
        for g in &mut self.domains {
            let n = g.squared_norm().sqrt();
            if n > max_norm {
                g.scale(max_norm / n);
            }
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (d, g) in Domain::BOTH.iter().zip(&self.domains) {
            if let Some(name) = g.first_non_finite() {
                return Err(Error::NonFiniteGradient(format!("{d}.{name}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub losses: StepLosses,
    pub grads: Option<GradientSet>,
    /// Hash of the sign pattern of every attention pre-activation; equal
    /// signatures mean the objective is smooth between two evaluations.
    pub kink_signature: u64,
}

/// Forward passes, losses and (if `with_grads`) exact gradients for a plan.
pub fn evaluate(
    plan: &StepPlan,
    model: &Model,
    nets: [&Network; 2],
    form: crate::losses::NeighborLossForm,
    weights: &LossWeights,
    with_grads: bool,
) -> Result<Evaluation> {
    let mut proj: [Option<Matrix>; 2] = [None, None];
    for d in Domain::BOTH {
        if plan.instances.iter().any(|i| i.domain == d) {
            let enc = model.encoder(d);
            proj[d.index()] = Some(project_all(&enc.table, &enc.layers[0]));
        }
    }

    let mut hasher = KinkHasher::default();
    let mut arena: Vec<Vec<f64>> = Vec::with_capacity(plan.instances.len());
    let mut traces: Vec<ForwardTrace> = Vec::with_capacity(if with_grads { plan.instances.len() } else { 1 });
    let mut scratch = ForwardTrace::default();
    for inst in &plan.instances {
        let p = proj[inst.domain.index()].as_ref().expect("projection computed");
        let trace = if with_grads {
            traces.push(ForwardTrace::default());
            traces.last_mut().expect("just pushed")
        } else {
            &mut scratch
        };
        forward_traced(&inst.sample, p, &model.encoder(inst.domain).layers, trace);
        hasher.absorb(trace);
        arena.push(trace.output().to_vec());
    }

    let mut parts = [LossValue::SKIPPED; 6];
    for d in Domain::BOTH {
        let terms = &plan.neighbor[d.index()];
        if !terms.is_empty() {
            parts[d.index()] = LossValue::of(neighbor_similarity_loss(&arena, terms, form)?);
        }
    }
    for (c, terms) in plan.contrast.iter().enumerate() {
        parts[c + 2] = contrastive_mean(&arena, terms)?;
    }
    let mut losses = StepLosses { parts, total: 0.0 };
    losses.total = losses.weighted(weights);

    let grads = if with_grads {
        let mut d_arena = vec![vec![0.0; model.config.d_out]; arena.len()];
        for d in Domain::BOTH {
            let terms = &plan.neighbor[d.index()];
            let w = weights.0[d.index()];
            if w != 0.0 && !terms.is_empty() {
                let scale = w / terms.len() as f64;
                for t in terms {
                    neighbor_term_grad(&arena, t, form, scale, &mut d_arena);
                }
            }
        }
        for (c, terms) in plan.contrast.iter().enumerate() {
            let w = weights.0[c + 2];
            if w != 0.0 && !terms.is_empty() {
                let scale = w / terms.len() as f64;
                for t in terms {
                    contrast_term_grad(&arena, t, scale, &mut d_arena)?;
                }
            }
        }
        let mut grads = GradientSet::zeros(model, nets);
        for ((inst, d_out), trace) in plan.instances.iter().zip(&d_arena).zip(&traces) {
            if d_out.iter().all(|&v| v == 0.0) {
                continue;
            }
            let di = inst.domain.index();
            let p = proj[di].as_ref().expect("projection computed");
            backward_sample(&inst.sample, p, &model.encoders[di].layers, d_out, &mut grads.domains[di], trace);
        }
        for d in Domain::BOTH {
            let enc = model.encoder(d);
            grads.domains[d.index()].finalize(&enc.table, &enc.layers[0]);
        }
        Some(grads)
    } else {
        None
    };
    Ok(Evaluation { losses, grads, kink_signature: hasher.finish() })
}

/// Computes the step losses and their gradients for a recorded plan.
pub fn backward(
    plan: &StepPlan,
    model: &Model,
    nets: [&Network; 2],
    loss: &LossConfig,
    weights: &LossWeights,
) -> Result<(StepLosses, GradientSet)> {
    let e = evaluate(plan, model, nets, loss.neighbor_form, weights, true)?;
    let grads = e.grads.expect("requested gradients");
    grads.check_finite()?;
    Ok((e.losses, grads))
}

#[derive(Default)]
struct KinkHasher {
    state: std::collections::hash_map::DefaultHasher,
    bits: u64,
    count: u32,
}

impl KinkHasher {
    fn absorb(&mut self, trace: &ForwardTrace) {
        let pres = trace.layer1.iter().map(|k| &k.pre).chain(std::iter::once(&trace.layer2.pre));
        for pre in pres {
            for &p in pre {
                self.bits = (self.bits << 1) | u64::from(p > 0.0);
                self.count += 1;
                if self.count == 64 {
                    self.state.write_u64(self.bits);
                    self.bits = 0;
                    self.count = 0;
                }
            }
        }
    }

    fn finish(mut self) -> u64 {
        self.state.write_u64(self.bits);
        self.state.write_u32(self.count);
        self.state.finish()
    }
}

// ---------------------------------------------------------------------------
// Optimizers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Some(OptimizerKind::Adam),
            "sgd" => Some(OptimizerKind::Sgd),
            _ => None,
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Adam with lazily updated embedding rows, or plain SGD.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    moments: Option<[[DomainEncoder; 2]; 2]>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, model: &Model) -> Self {
        let moments = match kind {
            OptimizerKind::Adam => {
                let mut zero = model.encoders.clone();
                for e in &mut zero {
                    e.for_each_block_mut(|b| b.iter_mut().for_each(|v| *v = 0.0));
                }
                Some([zero.clone(), zero])
            }
            OptimizerKind::Sgd => None,
        };
        Optimizer { kind, lr, t: 0, moments }
    }

    pub fn step(&mut self, model: &mut Model, grads: &GradientSet) {
        self.t += 1;
        let (lr, t) = (self.lr, self.t as i32);
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        let cols = model.config.d_in;
        for d in 0..2 {
            let g = &grads.domains[d];
            let rows: Vec<usize> = g.touched_rows().collect();
            for class in 0..CLASSES.len() {
                let gb = grad_block(g, class);
                // Embedding rows the step did not read keep their state.
                let idx: Vec<usize> = if class == 0 {
                    rows.iter().flat_map(|r| r * cols..(r + 1) * cols).collect()
                } else {
                    (0..gb.len()).collect()
                };
                let mut delta = vec![0.0; idx.len()];
                match &mut self.moments {
                    None => idx.iter().zip(&mut delta).for_each(|(&i, dv)| *dv = gb[i]),
                    Some([m, v]) => {
                        let mb = block_mut(&mut m[d], class);
                        for (&i, dv) in idx.iter().zip(&mut delta) {
                            mb[i] = BETA1 * mb[i] + (1.0 - BETA1) * gb[i];
                            *dv = mb[i] / c1;
                        }
                        let vb = block_mut(&mut v[d], class);
                        for (&i, dv) in idx.iter().zip(&mut delta) {
                            vb[i] = BETA2 * vb[i] + (1.0 - BETA2) * gb[i] * gb[i];
                            *dv /= (vb[i] / c2).sqrt() + EPS;
                        }
                    }
                }
                if lr != 0.0 {
                    let pb = block_mut(&mut model.encoders[d], class);
                    for (&i, dv) in idx.iter().zip(&delta) {
                        pb[i] -= lr * dv;
                    }
                }
            }
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Steps per epoch; by default enough for one pass over the larger
    /// domain's connected nodes.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub gradient_clip_norm: f64,
    pub strict_cold_start: bool,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub edge_smoothing: f64,
    pub min_ui_count: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            epochs: 10,
            steps_per_epoch: None,
            seed: 0,
            gradient_clip_norm: 5.0,
            strict_cold_start: false,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            edge_smoothing: 0.1,
            min_ui_count: 3.0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.gradient_clip_norm > 0.0) {
            return Err(Error::Config("gradient_clip_norm must be positive".into()));
        }
        self.loss.validate()?;
        self.model.validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights::from_config(&self.loss, self.strict_cold_start)
    }

    pub fn steps_for(&self, ctx: &TrainContext<'_>) -> usize {
        let per_epoch = self.steps_per_epoch.unwrap_or_else(|| {
            let largest = ctx.connected.iter().map(|c| c.len()).max().unwrap_or(0).max(1);
            largest.div_ceil(self.loss.batch_size)
        });
        per_epoch.max(1) * self.epochs
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<StepRecord>,
}

/// Trains both encoders jointly on the weighted multi-task objective.
pub fn train(
    source: &Network,
    target: &Network,
    aligned: &AlignedNodeSet,
    cfg: &TrainerConfig,
) -> Result<TrainOutcome> {
    train_with(source, target, aligned, cfg, |_| {})
}

/// [`train`] with a per-step observer.
pub fn train_with(
    source: &Network,
    target: &Network,
    aligned: &AlignedNodeSet,
    cfg: &TrainerConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ctx = TrainContext::new(source, target, aligned);
    let mut model = Model::init(source, target, cfg.model, cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &model);
    let weights = cfg.weights();
    let steps = cfg.steps_for(&ctx);
    let mut history = Vec::with_capacity(steps);
    let mut initial: Option<f64> = None;
    for step in 1..=steps {
        let plan = build_plan(&ctx, &cfg.model, &cfg.loss, &weights, cfg.seed, step as u64);
        let (losses, mut grads) = backward(&plan, &model, ctx.nets, &cfg.loss, &weights)?;
        let total = losses.total;
        let init = *initial.get_or_insert(total);
        if !total.is_finite() || (init > 0.0 && total > 10.0 * init) {
            return Err(Error::Diverged { step, loss: total, initial: init });
        }
        grads.clip(cfg.gradient_clip_norm);
        opt.step(&mut model, &grads);
        let rec = StepRecord::new(step, &losses);
        on_step(&rec);
        if step == 1 || step % 50 == 0 || step == steps {
            log::info!("step {step}/{steps} total {:.5}", total);
        }
        history.push(rec);
    }
    model.round_to_f32();
    Ok(TrainOutcome { model, history })
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tolerance: f64,
    /// Components whose analytic and numeric magnitudes are both below this
    /// are compared on this absolute scale instead of relatively.
    pub floor: f64,
    /// Multiplies analytic gradients before comparison; 1.0 for a real check.
    pub corrupt: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-4, tolerance: 1e-4, floor: 1e-4, corrupt: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub loss: String,
    pub class: String,
    pub max_rel_error: f64,
    pub compared: usize,
    /// Components skipped because the central difference crossed a LeakyReLU kink.
    pub kinks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < self.tolerance && self.rows.iter().all(|r| r.compared > 0 || r.kinks == 0)
    }
}

const CLASSES: [&str; 5] = ["base", "layer1.weight", "layer1.attention", "layer2.weight", "layer2.attention"];

fn block_mut(enc: &mut DomainEncoder, class: usize) -> &mut [f64] {
    match class {
        0 => &mut enc.table.vectors.data,
        1 => &mut enc.layers[0].weight.data,
        2 => &mut enc.layers[0].attention,
        3 => &mut enc.layers[1].weight.data,
        _ => &mut enc.layers[1].attention,
    }
}

fn grad_block(g: &EncoderGrads, class: usize) -> &[f64] {
    match class {
        0 => &g.base.data,
        1 => &g.layers[0].weight.data,
        2 => &g.layers[0].attention,
        3 => &g.layers[1].weight.data,
        _ => &g.layers[1].attention,
    }
}

/// Compares analytic gradients with central differences for each loss family
/// in isolation and for the weighted total, per parameter class.
pub fn gradient_check(
    model: &Model,
    plan: &StepPlan,
    nets: [&Network; 2],
    loss: &LossConfig,
    total_weights: &LossWeights,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let form = loss.neighbor_form;
    let mut objectives: Vec<(String, LossWeights)> = LossFamily::ALL
        .iter()
        .filter(|f| plan.term_count(**f) > 0)
        .map(|f| (f.name().to_string(), LossWeights::only(*f)))
        .collect();
    objectives.push(("total".to_string(), *total_weights));

    let analytic: Vec<GradientSet> = objectives
        .iter()
        .map(|(_, w)| Ok(evaluate(plan, model, nets, form, w, true)?.grads.expect("gradients")))
        .collect::<Result<_>>()?;
    let base = evaluate(plan, model, nets, form, total_weights, false)?;

    let mut rows: Vec<GradCheckRow> = Vec::new();
    let mut work = model.clone();
    for d in Domain::BOTH {
        for (ci, class) in CLASSES.iter().enumerate() {
            let len = block_mut(&mut work.encoders[d.index()], ci).len();
            let mut row_state: Vec<(f64, usize, usize)> = vec![(0.0, 0, 0); objectives.len()];
            for i in 0..len {
                if ci == 0 {
                    let cols = model.config.d_in;
                    let r = i / cols;
                    // Base rows outside the plan must have exactly zero gradient.
                    if !plan.touches(d, NodeId(r as u32)) {
                        for (o, g) in analytic.iter().enumerate() {
                            if grad_block(g.domain(d), 0)[i] != 0.0 {
                                row_state[o].0 = f64::INFINITY;
                            }
                        }
                        continue;
                    }
                }
                let orig = block_mut(&mut work.encoders[d.index()], ci)[i];
                block_mut(&mut work.encoders[d.index()], ci)[i] = orig + opts.h;
                let plus = evaluate(plan, &work, nets, form, total_weights, false)?;
                block_mut(&mut work.encoders[d.index()], ci)[i] = orig - opts.h;
                let minus = evaluate(plan, &work, nets, form, total_weights, false)?;
                block_mut(&mut work.encoders[d.index()], ci)[i] = orig;
                let smooth =
                    plus.kink_signature == base.kink_signature && minus.kink_signature == base.kink_signature;
                for (o, (_, w)) in objectives.iter().enumerate() {
                    if !smooth {
                        row_state[o].2 += 1;
                        continue;
                    }
                    let numeric = (plus.losses.weighted(w) - minus.losses.weighted(w)) / (2.0 * opts.h);
                    let a = grad_block(analytic[o].domain(d), ci)[i] * opts.corrupt;
                    let denom = a.abs().max(numeric.abs()).max(opts.floor);
                    let err = (a - numeric).abs() / denom;
                    row_state[o].0 = row_state[o].0.max(err);
                    row_state[o].1 += 1;
                }
            }
            for (o, (name, _)) in objectives.iter().enumerate() {
                let (max_rel_error, compared, kinks) = row_state[o];
                rows.push(GradCheckRow {
                    loss: name.clone(),
                    class: format!("{d}.{class}"),
                    max_rel_error,
                    compared,
                    kinks,
                });
            }
        }
    }
    Ok(GradCheckReport { rows, tolerance: opts.tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::Fanouts;
    use crate::graph::{aligned_nodes, NodeKind::*};

    fn toy(domain: Domain, seed: u64) -> Network {
        let mut r = rng::seeded(seed);
        let mut nodes = Vec::new();
        for (k, n) in [(User, 3), (Item, 8), (Tag, 3), (Category, 2), (Media, 1), (Word, 2)] {
            for i in 0..n {
                nodes.push((k, format!("{}{i}", k.as_str())));
            }
        }
        let mut edges = Vec::new();
        for i in 0..8 {
            let item = (Item, format!("item{i}"));
            for (k, n) in [(User, 3), (Tag, 3), (Category, 2), (Word, 2)] {
                let j = r.gen_range(0..n);
                edges.push((item.clone(), (k, format!("{}{j}", k.as_str())), r.gen_range(1.0..4.0)));
            }
            if i > 0 {
                edges.push((item.clone(), (Item, format!("item{}", i - 1)), 1.0));
            }
        }
        edges.push(((Item, "item0".into()), (Media, "media0".into()), 2.0));
        let mut net = Network::from_parts(domain, nodes, edges).unwrap();
        net.compute_edge_weights(0.1).unwrap();
        net
    }

    fn small_cfg() -> (ModelConfig, LossConfig) {
        let model = ModelConfig { d_in: 4, hidden: 3, d_out: 3, fanouts: Fanouts { outer: 3, inner: 2 } };
        let loss = LossConfig { negatives: 3, batch_size: 4, positives_per_anchor: 2, ..LossConfig::default() };
        (model, loss)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (s, t) = (toy(Domain::Source, 1), toy(Domain::Target, 2));
        let aligned = aligned_nodes(&s, &t);
        let ctx = TrainContext::new(&s, &t, &aligned);
        let (mcfg, lcfg) = small_cfg();
        let model = Model::init(&s, &t, mcfg, 3);
        let weights = LossWeights::from_config(&lcfg, false);
        let plan = build_plan(&ctx, &mcfg, &lcfg, &weights, 3, 1);
        for f in LossFamily::ALL {
            assert!(plan.term_count(f) > 0, "{}", f.name());
        }
        let report = gradient_check(&model, &plan, ctx.nets, &lcfg, &weights, &GradCheckOptions::default()).unwrap();
        for r in &report.rows {
            eprintln!("{} {} {:.2e} {} {}", r.loss, r.class, r.max_rel_error, r.compared, r.kinks);
        }
        assert!(report.passed(), "max error {}", report.max_error());

        let bad = GradCheckOptions { corrupt: 1.01, ..GradCheckOptions::default() };
        let report = gradient_check(&model, &plan, ctx.nets, &lcfg, &weights, &bad).unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn zero_learning_rate_is_bit_identical() {
        let (s, t) = (toy(Domain::Source, 1), toy(Domain::Target, 2));
        let aligned = aligned_nodes(&s, &t);
        let ctx = TrainContext::new(&s, &t, &aligned);
        let (mcfg, lcfg) = small_cfg();
        let mut model = Model::init(&s, &t, mcfg, 3);
        let before = model.clone();
        let weights = LossWeights::from_config(&lcfg, false);
        let plan = build_plan(&ctx, &mcfg, &lcfg, &weights, 3, 1);
        let (_, grads) = backward(&plan, &model, ctx.nets, &lcfg, &weights).unwrap();
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            Optimizer::new(kind, 0.0, &model).step(&mut model, &grads);
            assert_eq!(model, before);
        }
    }
}
