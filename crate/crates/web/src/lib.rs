//! WebAssembly bindings for the browser demo in `www/`.
//!
//! The page drives three operations on one [`Demo`]: generate a small
//! synthetic world, train the encoders for some steps, and match one held-out
//! user sequence with per-channel score breakdowns. Every method returns a
//! JSON string so the page needs no generated bindings beyond these.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use crossmatch::aggregator::Fanouts;
use crossmatch::eval::{metrics_of, match_all};
use crossmatch::graph::NodeKind;
use crossmatch::model::{Model, ModelConfig};
use crossmatch::pipeline::{build_index, kind_counts, Dataset};
use crossmatch::retrieval::{match_sequence, Channel, ChannelWeights, MatchOptions, RetrievalIndex};
use crossmatch::synth::{generate, SynthConfig};
use crossmatch::training::{train_with, TrainerConfig};

const INDEX_K: usize = 50;

/// Browser-sized world: a few hundred nodes per domain.
pub fn demo_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        user_groups: 60,
        items: 150,
        tags: 24,
        categories: 6,
        medias: 8,
        words: 40,
        latent_dim: 6,
        users_per_group: 2,
        source_behaviors: (8, 14),
        min_learnable: 0.0,
        max_ks: 1.0,
        ..SynthConfig::default()
    }
}

pub fn demo_trainer(seed: u64, steps: usize) -> TrainerConfig {
    let mut cfg = TrainerConfig {
        seed,
        learning_rate: 0.03,
        epochs: 1,
        steps_per_epoch: Some(steps.max(1)),
        model: ModelConfig { d_in: 16, hidden: 16, d_out: 16, fanouts: Fanouts { outer: 5, inner: 3 } },
        ..TrainerConfig::default()
    };
    cfg.loss.batch_size = 64;
    cfg
}

#[derive(Serialize)]
struct Summary {
    seed: u64,
    source: std::collections::BTreeMap<String, usize>,
    target: std::collections::BTreeMap<String, usize>,
    aligned: usize,
    tests: usize,
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    /// Total loss per step.
    loss: Vec<f64>,
    hit_at_50: f64,
    coverage: f64,
}

#[derive(Serialize)]
struct Row {
    item: String,
    score: f64,
    breakdown: [f64; 6],
    hit: bool,
}

#[derive(Serialize)]
struct MatchView {
    user: String,
    sequence: Vec<String>,
    truth: Vec<String>,
    channels: Vec<&'static str>,
    rows: Vec<Row>,
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    seed: u64,
    data: Dataset,
    index: RetrievalIndex,
}

impl Demo {
    /// Generates the world and indexes it with untrained encoders.
    pub fn create(seed: u64) -> crossmatch::Result<Demo> {
        let cfg = demo_synth(seed);
        let trainer = demo_trainer(seed, 1);
        let data = Dataset::from_synth(&generate(&cfg)?, trainer.min_ui_count, trainer.edge_smoothing)?;
        let model = Model::init(&data.source, &data.target, trainer.model, seed);
        let (index, _) = build_index(&model, &data.source, &data.target, INDEX_K, seed, 1)?;
        Ok(Demo { seed, data, index })
    }

    pub fn summary(&self) -> String {
        let s = Summary {
            seed: self.seed,
            source: kind_counts(&self.data.source),
            target: kind_counts(&self.data.target),
            aligned: self.data.aligned.entries.len(),
            tests: self.data.tests.len(),
        };
        serde_json::to_string(&s).expect("serializable")
    }

    /// Trains from scratch for `steps` and re-indexes.
    pub fn run_training(&mut self, steps: usize) -> crossmatch::Result<String> {
        let cfg = demo_trainer(self.seed, steps);
        let mut loss = Vec::with_capacity(steps);
        let out = train_with(&self.data.source, &self.data.target, &self.data.aligned, &cfg, |r| loss.push(r.total))?;
        let (index, _) = build_index(&out.model, &self.data.source, &self.data.target, INDEX_K, self.seed, 1)?;
        self.index = index;
        let results = match_all(&self.data.tests, &self.index, &MatchOptions::default(), 1);
        let corpus = self.data.target.nodes_of_kind(NodeKind::Item).len();
        let m = metrics_of(&results, &self.data.tests, corpus)?;
        let s = TrainSummary { steps: loss.len(), loss, hit_at_50: m.hit_at(50), coverage: m.coverage };
        Ok(serde_json::to_string(&s).expect("serializable"))
    }

    /// Top `top` items for test instance `i` under the given channel weights
    /// (in user, item, tag, category, media, word order).
    pub fn match_instance(&self, i: usize, weights: &[f64], top: usize) -> crossmatch::Result<String> {
        let t = self
            .data
            .tests
            .get(i % self.data.tests.len().max(1))
            .ok_or(crossmatch::Error::EmptyTestSet)?;
        let mut w = ChannelWeights::default();
        for (c, &v) in Channel::ALL.iter().zip(weights) {
            w.set(*c, v);
        }
        let opts = MatchOptions { weights: w, top_n: top.max(1), ..MatchOptions::default() };
        let r = match_sequence(&t.sequence, &self.index, &opts);
        let view = MatchView {
            user: t.user.clone(),
            sequence: t.sequence.events.iter().map(|e| e.item.clone()).collect(),
            truth: t.truth.clone(),
            channels: Channel::ALL.iter().map(|c| c.kind().as_str()).collect(),
            rows: r
                .items
                .into_iter()
                .map(|s| Row { hit: t.truth.contains(&s.item), item: s.item, score: s.score, breakdown: s.breakdown })
                .collect(),
        };
        Ok(serde_json::to_string(&view).expect("serializable"))
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        Demo::create(u64::from(seed)).map_err(js_err)
    }

    #[wasm_bindgen(js_name = summary)]
    pub fn summary_js(&self) -> String {
        self.summary()
    }

    pub fn train(&mut self, steps: u32) -> Result<String, JsError> {
        self.run_training(steps as usize).map_err(js_err)
    }

    #[wasm_bindgen(js_name = matchInstance)]
    pub fn match_js(&self, i: u32, weights: Vec<f64>, top: u32) -> Result<String, JsError> {
        self.match_instance(i as usize, &weights, top as usize).map_err(js_err)
    }
}
