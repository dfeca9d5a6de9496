use serde::{Deserialize, Serialize};

use crate::aggregator::{check_layers, forward_traced, project_all, EmbeddingTable, Fanouts, ForwardTrace, GatLayer, NeighborhoodSample};
use crate::error::{Error, Result};
use crate::graph::{Domain, Network, NodeId};
use crate::linalg::Matrix;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
    pub fanouts: Fanouts,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { d_in: 128, hidden: 100, d_out: 100, fanouts: Fanouts::default() }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.hidden == 0 || self.d_out == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.fanouts.outer == 0 || self.fanouts.inner == 0 {
            return Err(Error::Config("fan-outs must be positive".into()));
        }
        Ok(())
    }
}

/// Base embeddings plus both attention layers for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEncoder {
    pub table: EmbeddingTable,
    pub layers: [GatLayer; 2],
}

impl DomainEncoder {
    pub fn random<R: rand::Rng + ?Sized>(nodes: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        DomainEncoder {
            table: EmbeddingTable::random(nodes, cfg.d_in, rng),
            layers: [GatLayer::random(cfg.d_in, cfg.hidden, rng), GatLayer::random(cfg.hidden, cfg.d_out, rng)],
        }
    }

    pub fn check(&self) -> Result<()> {
        check_layers(&self.table, &self.layers)
    }

    /// Visits every parameter block mutably, base embeddings first.
    pub fn for_each_block_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        f(&mut self.table.vectors.data);
        for l in &mut self.layers {
            f(&mut l.weight.data);
            f(&mut l.attention);
        }
    }

    pub fn for_each_block(&self, mut f: impl FnMut(&[f64])) {
        f(&self.table.vectors.data);
        for l in &self.layers {
            f(&l.weight.data);
            f(&l.attention);
        }
    }
}

/// Encoders for both domains. Layer parameters are not shared across domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub encoders: [DomainEncoder; 2],
}

const INFER_STREAM: u64 = 0x1f3a;

impl Model {
    pub fn init(source: &Network, target: &Network, config: ModelConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[0x1417]);
        let s = DomainEncoder::random(source.len(), &config, &mut r);
        let t = DomainEncoder::random(target.len(), &config, &mut r);
        Model { config, encoders: [s, t] }
    }

    pub fn encoder(&self, d: Domain) -> &DomainEncoder {
        &self.encoders[d.index()]
    }

    pub fn encoder_mut(&mut self, d: Domain) -> &mut DomainEncoder {
        &mut self.encoders[d.index()]
    }

    /// Rounds every parameter to the nearest `f32`, so that a checkpoint
    /// written in 32-bit form reloads to exactly this model.
    pub fn round_to_f32(&mut self) {
        for enc in &mut self.encoders {
            enc.for_each_block_mut(|b| b.iter_mut().for_each(|v| *v = *v as f32 as f64));
        }
    }

    /// Deterministic neighborhood used to embed `node` at inference.
    pub fn inference_sample(&self, net: &Network, node: NodeId, seed: u64) -> NeighborhoodSample {
        let s = rng::derive(seed, &[INFER_STREAM, net.domain().index() as u64, node.0 as u64]);
        NeighborhoodSample::seeded(net, node, self.config.fanouts, s)
    }

    /// Aggregated embeddings of every node of `net`, one row per node.
    pub fn embed_all(&self, net: &Network, seed: u64) -> Matrix {
        let enc = self.encoder(net.domain());
        let proj = project_all(&enc.table, &enc.layers[0]);
        let mut out = Matrix::zeros(net.len(), self.config.d_out);
        let mut trace = ForwardTrace::default();
        for node in net.node_ids() {
            let sample = self.inference_sample(net, node, seed);
            forward_traced(&sample, &proj, &enc.layers, &mut trace);
            out.row_mut(node.ix()).copy_from_slice(trace.output());
        }
        out
    }
}
