//! Two-layer single-head graph attention over sampled neighborhoods.
//!
//! Each layer projects its inputs with `W`, scores every neighbor with
//! `LeakyReLU(aᵀ[W·h_root ‖ W·h_k])`, softmax-normalizes the scores and emits
//! `σ(Σ α_k W·h_k)` with an elementwise logistic sigmoid.
//!
//! Layer 1 works on base embeddings. Because the projection `W¹·e⁰` of a node
//! does not depend on where it appears, training projects every node once per
//! step and the attention kernels read those rows; the public [`forward`]
//! projects only what a sample touches. Both paths share the same kernels.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Network, NodeId};
use crate::linalg::{axpy, dot, leaky_relu, leaky_relu_grad, sigmoid, softmax_into, Matrix};

/// Base vectors `e⁰`, one row per node in the owning network's canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub vectors: Matrix,
}

impl EmbeddingTable {
    /// Uniform with unit variance.
    pub fn random<R: Rng + ?Sized>(nodes: usize, dim: usize, rng: &mut R) -> Self {
        let bound = 3f64.sqrt();
        let data = (0..nodes * dim).map(|_| rng.gen_range(-bound..=bound)).collect();
        EmbeddingTable { vectors: Matrix::from_vec(nodes, dim, data) }
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols
    }

    pub fn len(&self) -> usize {
        self.vectors.rows
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows == 0
    }

    pub fn get(&self, node: NodeId) -> &[f64] {
        self.vectors.row(node.ix())
    }
}

/// Weighting matrix `W` (`d_out × d_in`) and attention vector `a` (`2·d_out`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatLayer {
    pub weight: Matrix,
    pub attention: Vec<f64>,
}

impl GatLayer {
    pub fn new(weight: Matrix, attention: Vec<f64>) -> Result<Self> {
        if attention.len() != 2 * weight.rows {
            return Err(Error::DimensionMismatch { expected: 2 * weight.rows, got: attention.len() });
        }
        Ok(GatLayer { weight, attention })
    }

    /// Glorot-uniform weights and attention vector.
    pub fn random<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let wb = (6.0 / (d_in + d_out) as f64).sqrt();
        let ab = (6.0 / (2 * d_out + 1) as f64).sqrt();
        let weight = Matrix::from_vec(d_out, d_in, (0..d_in * d_out).map(|_| rng.gen_range(-wb..=wb)).collect());
        let attention = (0..2 * d_out).map(|_| rng.gen_range(-ab..=ab)).collect();
        GatLayer { weight, attention }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        GatLayer { weight: Matrix::zeros(d_out, d_in), attention: vec![0.0; 2 * d_out] }
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows
    }

    fn check_input(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.d_in() {
            return Err(Error::DimensionMismatch { expected: self.d_in(), got: v.len() });
        }
        Ok(())
    }
}

/// Fan-outs for the two aggregation levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fanouts {
    /// Direct neighbors aggregated into the root by layer 2.
    pub outer: usize,
    /// Neighbors aggregated into each of those by layer 1.
    pub inner: usize,
}

impl Default for Fanouts {
    fn default() -> Self {
        Fanouts { outer: 25, inner: 10 }
    }
}

/// A sampled two-hop neighborhood of `root`.
///
/// `root_hops` is the root's own inner neighborhood, which layer 1 needs to
/// produce the root's query representation for layer 2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborhoodSample {
    pub root: NodeId,
    pub root_hops: Vec<NodeId>,
    pub neighbors: Vec<NodeId>,
    /// `neighbors.len() × inner`, row-major.
    pub hops: Vec<NodeId>,
    pub inner: usize,
    pub seed: u64,
}

impl NeighborhoodSample {
    pub fn draw<R: Rng + ?Sized>(net: &Network, root: NodeId, fanouts: Fanouts, rng: &mut R, seed: u64) -> Self {
        let root_hops = net.sample_neighbors(root, fanouts.inner, rng);
        let neighbors = net.sample_neighbors(root, fanouts.outer, rng);
        let mut hops = Vec::with_capacity(fanouts.outer * fanouts.inner);
        let mut buf = Vec::with_capacity(fanouts.inner);
        for &n in &neighbors {
            net.sample_neighbors_into(n, fanouts.inner, rng, &mut buf);
            hops.extend_from_slice(&buf);
        }
        NeighborhoodSample { root, root_hops, neighbors, hops, inner: fanouts.inner, seed }
    }

    /// Draws with a private generator seeded from `seed`.
    pub fn seeded(net: &Network, root: NodeId, fanouts: Fanouts, seed: u64) -> Self {
        let mut rng = crate::rng::seeded(seed);
        Self::draw(net, root, fanouts, &mut rng, seed)
    }

    pub fn hops_of(&self, k: usize) -> &[NodeId] {
        &self.hops[k * self.inner..(k + 1) * self.inner]
    }

    /// Layer-1 aggregations in this sample: `(center, its hop list)`, root first.
    pub fn layer1_sites(&self) -> impl Iterator<Item = (NodeId, &[NodeId])> {
        std::iter::once((self.root, self.root_hops.as_slice()))
            .chain(self.neighbors.iter().enumerate().map(move |(k, &n)| (n, self.hops_of(k))))
    }

    /// Every node whose base embedding the forward pass reads.
    pub fn touched(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.layer1_sites().flat_map(|(c, hops)| std::iter::once(c).chain(hops.iter().copied()))
    }

    pub fn validate(&self, fanouts: Fanouts) -> Result<()> {
        let ok = self.root_hops.len() == fanouts.inner
            && self.neighbors.len() == fanouts.outer
            && self.hops.len() == fanouts.outer * fanouts.inner
            && self.inner == fanouts.inner;
        if ok {
            Ok(())
        } else {
            Err(Error::LengthMismatch("neighborhood sample does not match fan-outs".into()))
        }
    }
}

/// Attention state of one kernel evaluation, kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct KernelTrace {
    pub pre: Vec<f64>,
    pub alpha: Vec<f64>,
    pub out: Vec<f64>,
}

/// Attention + sigmoid aggregation on already-projected vectors.
pub(crate) fn attend(query: &[f64], keys: &[&[f64]], attention: &[f64], trace: &mut KernelTrace) {
    let d = query.len();
    let (a_q, a_k) = attention.split_at(d);
    let q_term = dot(a_q, query);
    trace.pre.clear();
    trace.pre.extend(keys.iter().map(|k| q_term + dot(a_k, k)));
    let logits: Vec<f64> = trace.pre.iter().map(|&s| leaky_relu(s)).collect();
    softmax_into(&logits, &mut trace.alpha);
    trace.out.clear();
    trace.out.resize(d, 0.0);
    for (k, &a) in keys.iter().zip(&trace.alpha) {
        axpy(a, k, &mut trace.out);
    }
    for v in trace.out.iter_mut() {
        *v = sigmoid(*v);
    }
}

/// Reverse of [`attend`]: accumulates into `d_query`, `d_keys[k]` and `d_attention`.
pub(crate) fn attend_backward(
    query: &[f64],
    keys: &[&[f64]],
    attention: &[f64],
    trace: &KernelTrace,
    d_out: &[f64],
    d_query: &mut [f64],
    d_keys: &mut [Vec<f64>],
    d_attention: &mut [f64],
) {
    let d = query.len();
    let (a_q, a_k) = attention.split_at(d);
    let du: Vec<f64> = d_out.iter().zip(&trace.out).map(|(g, y)| g * y * (1.0 - y)).collect();
    let d_alpha: Vec<f64> = keys.iter().map(|k| dot(&du, k)).collect();
    let mean: f64 = trace.alpha.iter().zip(&d_alpha).map(|(a, g)| a * g).sum();
    let mut ds_total = 0.0;
    let (da_q, da_k) = d_attention.split_at_mut(d);
    for (k, key) in keys.iter().enumerate() {
        let alpha = trace.alpha[k];
        let ds = alpha * (d_alpha[k] - mean) * leaky_relu_grad(trace.pre[k]);
        ds_total += ds;
        axpy(ds, key, da_k);
        let dk = &mut d_keys[k];
        axpy(alpha, &du, dk);
        axpy(ds, a_k, dk);
    }
    axpy(ds_total, query, da_q);
    axpy(ds_total, a_q, d_query);
}

/// Softmax attention weights of each neighbor around `h_root`.
pub fn attention_coefficients(h_root: &[f64], h_neighbors: &[&[f64]], layer: &GatLayer) -> Result<Vec<f64>> {
    Ok(layer_kernel(h_root, h_neighbors, layer)?.alpha)
}

/// One aggregation layer: `σ(Σ α_k W h_k)`.
pub fn aggregate_layer(h_root: &[f64], h_neighbors: &[&[f64]], layer: &GatLayer) -> Result<Vec<f64>> {
    Ok(layer_kernel(h_root, h_neighbors, layer)?.out)
}

fn layer_kernel(h_root: &[f64], h_neighbors: &[&[f64]], layer: &GatLayer) -> Result<KernelTrace> {
    if h_neighbors.is_empty() {
        return Err(Error::EmptyBatch);
    }
    layer.check_input(h_root)?;
    for h in h_neighbors {
        layer.check_input(h)?;
    }
    let query = layer.weight.matvec(h_root);
    let keys: Vec<Vec<f64>> = h_neighbors.iter().map(|h| layer.weight.matvec(h)).collect();
    let key_refs: Vec<&[f64]> = keys.iter().map(|k| k.as_slice()).collect();
    let mut trace = KernelTrace::default();
    attend(&query, &key_refs, &layer.attention, &mut trace);
    Ok(trace)
}

/// Source of layer-1 projections `W¹·e⁰_v`.
pub(crate) trait Projections {
    fn proj(&self, node: NodeId) -> &[f64];
}

impl Projections for Matrix {
    fn proj(&self, node: NodeId) -> &[f64] {
        self.row(node.ix())
    }
}

impl Projections for HashMap<NodeId, Vec<f64>> {
    fn proj(&self, node: NodeId) -> &[f64] {
        &self[&node]
    }
}

/// Full trace of one two-layer forward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct ForwardTrace {
    /// Layer-1 kernels, root site first then one per outer neighbor.
    pub layer1: Vec<KernelTrace>,
    /// `W²·e¹` for every layer-1 site, same order.
    pub projected2: Vec<Vec<f64>>,
    pub layer2: KernelTrace,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        &self.layer2.out
    }
}

pub(crate) fn forward_traced<P: Projections>(
    sample: &NeighborhoodSample,
    proj: &P,
    layers: &[GatLayer; 2],
    trace: &mut ForwardTrace,
) {
    let sites = 1 + sample.neighbors.len();
    trace.layer1.resize_with(sites, KernelTrace::default);
    trace.projected2.resize_with(sites, Vec::new);
    let mut keys: Vec<&[f64]> = Vec::with_capacity(sample.inner);
    for (s, (center, hops)) in sample.layer1_sites().enumerate() {
        keys.clear();
        keys.extend(hops.iter().map(|&h| proj.proj(h)));
        attend(proj.proj(center), &keys, &layers[0].attention, &mut trace.layer1[s]);
        let p2 = &mut trace.projected2[s];
        p2.resize(layers[1].d_out(), 0.0);
        layers[1].weight.matvec_into(&trace.layer1[s].out, p2);
    }
    let keys2: Vec<&[f64]> = trace.projected2[1..].iter().map(|v| v.as_slice()).collect();
    attend(&trace.projected2[0], &keys2, &layers[1].attention, &mut trace.layer2);
}

/// Gradient buffers for one domain's encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    /// Gradient w.r.t. layer-1 projections, one row per node.
    pub(crate) projected: Matrix,
    pub(crate) touched: Vec<bool>,
    pub base: Matrix,
    pub layers: [GatLayer; 2],
}

impl EncoderGrads {
    pub fn zeros(nodes: usize, d_in: usize, hidden: usize, d_out: usize) -> Self {
        EncoderGrads {
            projected: Matrix::zeros(nodes, hidden),
            touched: vec![false; nodes],
            base: Matrix::zeros(nodes, d_in),
            layers: [GatLayer::zeros(d_in, hidden), GatLayer::zeros(hidden, d_out)],
        }
    }

    pub fn touched_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.touched.iter().enumerate().filter(|(_, &t)| t).map(|(i, _)| i)
    }

    /// Converts projection gradients into `W¹` and base-embedding gradients.
    pub(crate) fn finalize(&mut self, table: &EmbeddingTable, layer1: &GatLayer) {
        for r in 0..self.touched.len() {
            if !self.touched[r] {
                continue;
            }
            let dp = self.projected.row(r).to_vec();
            self.layers[0].weight.add_outer(&dp, table.vectors.row(r));
            layer1.weight.matvec_t_acc(&dp, self.base.row_mut(r));
        }
    }

    pub fn squared_norm(&self) -> f64 {
        let mut s: f64 = self.touched_rows().map(|r| self.base.row(r).iter().map(|v| v * v).sum::<f64>()).sum();
        for l in &self.layers {
            s += l.weight.data.iter().map(|v| v * v).sum::<f64>();
            s += l.attention.iter().map(|v| v * v).sum::<f64>();
        }
        s
    }

    pub fn scale(&mut self, factor: f64) {
        let rows: Vec<usize> = self.touched_rows().collect();
        for r in rows {
            self.base.row_mut(r).iter_mut().for_each(|v| *v *= factor);
        }
        for l in &mut self.layers {
            l.weight.data.iter_mut().for_each(|v| *v *= factor);
            l.attention.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Name of the first parameter block holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        if !self.touched_rows().all(|r| self.base.row(r).iter().all(|v| v.is_finite())) {
            return Some("base embeddings");
        }
        let names = [("layer1.weight", "layer1.attention"), ("layer2.weight", "layer2.attention")];
        for (l, (w, a)) in self.layers.iter().zip(names) {
            if !l.weight.is_finite() {
                return Some(w);
            }
            if !l.attention.iter().all(|v| v.is_finite()) {
                return Some(a);
            }
        }
        None
    }
}

/// Reverse pass for one sample given `∂L/∂output` and the trace of its
/// forward pass.
pub(crate) fn backward_sample<P: Projections>(
    sample: &NeighborhoodSample,
    proj: &P,
    layers: &[GatLayer; 2],
    d_output: &[f64],
    grads: &mut EncoderGrads,
    trace: &ForwardTrace,
) {
    let sites = 1 + sample.neighbors.len();
    let hidden = layers[0].d_out();
    let d_out = layers[1].d_out();

    // Layer 2.
    let keys2: Vec<&[f64]> = trace.projected2[1..].iter().map(|v| v.as_slice()).collect();
    let mut d_q2 = vec![0.0; d_out];
    let mut d_k2 = vec![vec![0.0; d_out]; sites - 1];
    attend_backward(
        &trace.projected2[0],
        &keys2,
        &layers[1].attention,
        &trace.layer2,
        d_output,
        &mut d_q2,
        &mut d_k2,
        &mut grads.layers[1].attention,
    );

    // Through W² into each layer-1 site, then layer 1 into the projections.
    let mut d_keys1 = vec![vec![0.0; hidden]; sample.inner];
    let mut key_refs: Vec<&[f64]> = Vec::with_capacity(sample.inner);
    for (s, (center, hops)) in sample.layer1_sites().enumerate() {
        let d_p2 = if s == 0 { &d_q2 } else { &d_k2[s - 1] };
        grads.layers[1].weight.add_outer(d_p2, &trace.layer1[s].out);
        let mut d_e1 = vec![0.0; hidden];
        layers[1].weight.matvec_t_acc(d_p2, &mut d_e1);

        key_refs.clear();
        key_refs.extend(hops.iter().map(|&h| proj.proj(h)));
        let mut d_q1 = vec![0.0; hidden];
        for k in d_keys1.iter_mut() {
            k.iter_mut().for_each(|v| *v = 0.0);
        }
        attend_backward(
            proj.proj(center),
            &key_refs,
            &layers[0].attention,
            &trace.layer1[s],
            &d_e1,
            &mut d_q1,
            &mut d_keys1,
            &mut grads.layers[0].attention,
        );
        axpy(1.0, &d_q1, grads.projected.row_mut(center.ix()));
        grads.touched[center.ix()] = true;
        for (&h, dk) in hops.iter().zip(&d_keys1) {
            axpy(1.0, dk, grads.projected.row_mut(h.ix()));
            grads.touched[h.ix()] = true;
        }
    }
}

/// Aggregated representation of `sample.root`.
pub fn forward(sample: &NeighborhoodSample, table: &EmbeddingTable, layers: &[GatLayer; 2]) -> Result<Vec<f64>> {
    check_layers(table, layers)?;
    let mut proj: HashMap<NodeId, Vec<f64>> = HashMap::new();
    for n in sample.touched() {
        if n.ix() >= table.len() {
            return Err(Error::LengthMismatch(format!("node {} outside embedding table", n.0)));
        }
        proj.entry(n).or_insert_with(|| layers[0].weight.matvec(table.get(n)));
    }
    let mut trace = ForwardTrace::default();
    forward_traced(sample, &proj, layers, &mut trace);
    Ok(trace.layer2.out)
}

/// Row `i` equals `forward(samples[i], ..)`.
pub fn forward_batch(
    nodes: &[NodeId],
    samples: &[NeighborhoodSample],
    table: &EmbeddingTable,
    layers: &[GatLayer; 2],
) -> Result<Vec<Vec<f64>>> {
    if nodes.len() != samples.len() {
        return Err(Error::LengthMismatch(format!("{} nodes but {} samples", nodes.len(), samples.len())));
    }
    nodes
        .iter()
        .zip(samples)
        .map(|(n, s)| {
            if s.root != *n {
                return Err(Error::LengthMismatch(format!("sample root {} is not node {}", s.root.0, n.0)));
            }
            forward(s, table, layers)
        })
        .collect()
}

pub(crate) fn check_layers(table: &EmbeddingTable, layers: &[GatLayer; 2]) -> Result<()> {
    if layers[0].d_in() != table.dim() {
        return Err(Error::DimensionMismatch { expected: layers[0].d_in(), got: table.dim() });
    }
    if layers[1].d_in() != layers[0].d_out() {
        return Err(Error::DimensionMismatch { expected: layers[1].d_in(), got: layers[0].d_out() });
    }
    if 2 * layers[0].d_out() != layers[0].attention.len() || 2 * layers[1].d_out() != layers[1].attention.len() {
        return Err(Error::DimensionMismatch { expected: 2 * layers[1].d_out(), got: layers[1].attention.len() });
    }
    Ok(())
}

/// Projects every base embedding through `W¹`.
pub(crate) fn project_all(table: &EmbeddingTable, layer1: &GatLayer) -> Matrix {
    let mut out = Matrix::zeros(table.len(), layer1.d_out());
    for r in 0..table.len() {
        let (src, dst) = (table.vectors.row(r), r);
        layer1.weight.matvec_into(src, out.row_mut(dst));
    }
    out
}
