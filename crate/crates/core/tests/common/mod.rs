#![allow(dead_code)]

use std::collections::BTreeMap;

use crossmatch::graph::{Domain, Network, NodeKind};
use crossmatch::retrieval::{BehaviorEvent, BehaviorSequence, ChannelWeights, MatchOptions, RetrievalIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random connected-ish two-domain toy network with `size` nodes
/// (at least 10). Ids overlap between domains so that alignment is non-empty.
pub fn toy_network(domain: Domain, size: usize, seed: u64) -> Network {
    use NodeKind::*;
    let mut r = rng(seed);
    let size = size.max(10);
    let mut counts = [(User, 2), (Item, 3), (Tag, 2), (Category, 1), (Media, 1), (Word, 1)];
    for _ in 10..size {
        let k = r.gen_range(0..6);
        counts[k].1 += 1;
    }
    let mut nodes = Vec::new();
    for (k, n) in counts {
        for i in 0..n {
            nodes.push((k, format!("{}{i}", k.as_str())));
        }
    }
    let n_items = counts[1].1;
    let mut edges = Vec::new();
    for i in 0..n_items {
        let item = (Item, format!("item{i}"));
        for (k, n) in counts {
            if k == Item {
                continue;
            }
            if k == Media || r.gen_bool(0.7) {
                let j = r.gen_range(0..n);
                edges.push((item.clone(), (k, format!("{}{j}", k.as_str())), r.gen_range(1.0..5.0)));
            }
        }
        if i > 0 {
            edges.push((item.clone(), (Item, format!("item{}", r.gen_range(0..i))), r.gen_range(1.0..3.0)));
        }
    }
    // Make sure every non-item node has an edge.
    for (k, n) in counts {
        if k == Item {
            continue;
        }
        for j in 0..n {
            let it = r.gen_range(0..n_items);
            edges.push(((Item, format!("item{it}")), (k, format!("{}{j}", k.as_str())), 1.0));
        }
    }
    let mut net = Network::from_parts(domain, nodes, edges).unwrap();
    net.compute_edge_weights(0.1).unwrap();
    net
}

pub fn random_vec(r: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| r.gen_range(-scale..scale)).collect()
}

/// A random index over at most 100 items together with the raw embeddings
/// it was built from.
pub struct Scenario {
    pub items: Vec<(String, Vec<f64>)>,
    pub anchors: BTreeMap<(NodeKind, String), Vec<f64>>,
    pub index: RetrievalIndex,
    pub seq: BehaviorSequence,
    pub opts: MatchOptions,
}

pub fn scenario(seed: u64) -> Scenario {
    use NodeKind::*;
    let mut r = rng(seed);
    let d = r.gen_range(2..8);
    let n_items = r.gen_range(1..=100);
    let items: Vec<(String, Vec<f64>)> = (0..n_items).map(|i| (format!("t{i:03}"), random_vec(&mut r, d, 1.0))).collect();
    let mut anchors = BTreeMap::new();
    let pools = [(Item, 15), (Tag, 8), (Category, 4), (Media, 3), (Word, 10), (User, 3)];
    for (kind, n) in pools {
        for i in 0..n {
            anchors.insert((kind, format!("{}{i}", kind.as_str())), random_vec(&mut r, d, 1.0));
        }
    }
    let refs: Vec<(NodeKind, String, &[f64])> = anchors.iter().map(|((k, id), v)| (*k, id.clone(), v.as_slice())).collect();
    let item_refs: Vec<(String, &[f64])> = items.iter().map(|(id, v)| (id.clone(), v.as_slice())).collect();
    let (index, _) = RetrievalIndex::build(&refs, &item_refs, 100, 1).unwrap();

    let pick = |r: &mut ChaCha8Rng, kind: NodeKind, n: usize, max: usize| -> Vec<String> {
        // Occasionally reference an attribute that has no index list.
        (0..r.gen_range(0..=max))
            .map(|_| if r.gen_bool(0.05) { "missing".to_string() } else { format!("{}{}", kind.as_str(), r.gen_range(0..n)) })
            .collect()
    };
    let n_events = r.gen_range(0..8);
    let events = (0..n_events)
        .map(|_| BehaviorEvent {
            item: format!("item{}", r.gen_range(0..18)),
            satisf: r.gen_range(0.0..=1.0),
            tags: pick(&mut r, Tag, 8, 3),
            category: pick(&mut r, Category, 4, 1),
            media: if r.gen_bool(0.7) { Some(format!("media{}", r.gen_range(0..3))) } else { None },
            words: pick(&mut r, Word, 10, 4),
        })
        .collect();
    let seq = BehaviorSequence { user_group: format!("user{}", r.gen_range(0..4)), events };
    let mut w = [1.0; 6];
    if r.gen_bool(0.5) {
        for x in w.iter_mut() {
            *x = r.gen_range(0.0..3.0);
        }
    }
    let opts = MatchOptions { weights: ChannelWeights(w), top_n: r.gen_range(1..=500), filter_history: false };
    Scenario { items, anchors, index, seq, opts }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

/// Every item scored by the six channel formulas evaluated directly from the
/// embeddings, sorted by score then id, cut to `top_n`.
pub fn exhaustive(s: &Scenario) -> Vec<(String, f64, [f64; 6])> {
    use NodeKind::*;
    let n = s.seq.events.len();
    let mut rows: Vec<(String, f64, [f64; 6])> = Vec::new();
    let mut any = false;
    for (id, v) in &s.items {
        let mut b = [0.0; 6];
        if let Some(u) = s.anchors.get(&(User, s.seq.user_group.clone())) {
            b[0] = cosine(u, v);
            any = true;
        }
        for (j, e) in s.seq.events.iter().enumerate() {
            let w = e.satisf * 0.95f64.powi((n - 1 - j) as i32);
            let groups: [(usize, NodeKind, Vec<String>); 5] = [
                (1, Item, vec![e.item.clone()]),
                (2, Tag, e.tags.clone()),
                (3, Category, e.category.clone()),
                (4, Media, e.media.iter().cloned().collect()),
                (5, Word, e.words.clone()),
            ];
            for (c, kind, attrs) in groups {
                for a in attrs {
                    if let Some(av) = s.anchors.get(&(kind, a)) {
                        b[c] += cosine(av, v) * w;
                        any = true;
                    }
                }
            }
        }
        for (c, x) in b.iter_mut().enumerate() {
            *x *= s.opts.weights.0[c];
        }
        rows.push((id.clone(), b.iter().sum(), b));
    }
    if !any {
        return Vec::new();
    }
    rows.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    rows.truncate(s.opts.top_n);
    rows
}

/// A synthetic world of a few hundred nodes per domain.
pub fn small_synth(seed: u64) -> crossmatch::synth::SynthConfig {
    crossmatch::synth::SynthConfig {
        seed,
        user_groups: 40,
        items: 120,
        tags: 20,
        categories: 5,
        medias: 6,
        words: 30,
        latent_dim: 6,
        users_per_group: 2,
        source_behaviors: (8, 14),
        min_learnable: 0.0,
        max_ks: 1.0,
        ..Default::default()
    }
}

pub fn small_trainer(seed: u64, steps: usize) -> crossmatch::training::TrainerConfig {
    use crossmatch::aggregator::Fanouts;
    use crossmatch::model::ModelConfig;
    let mut cfg = crossmatch::training::TrainerConfig {
        seed,
        learning_rate: 0.03,
        epochs: 1,
        steps_per_epoch: Some(steps),
        model: ModelConfig { d_in: 8, hidden: 8, d_out: 8, fanouts: Fanouts { outer: 4, inner: 3 } },
        ..Default::default()
    };
    cfg.loss.batch_size = 32;
    cfg
}
