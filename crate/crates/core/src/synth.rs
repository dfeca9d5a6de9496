//! Synthetic two-domain datasets with a known latent interest structure.
//!
//! Categories, tags, words and medias carry latent vectors; items inherit a
//! blend of their attributes' vectors; users inherit their group's. A user
//! picks items with probability proportional to `popularity · exp(β·u·v)`.
//! Aligned user groups and taxonomy nodes share ids and latent vectors across
//! domains, which is what makes cross-domain transfer possible.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::eval::TestInstance;
use crate::graph::{Domain, EdgeKind, NodeKind};
use crate::linalg::dot;
use crate::retrieval::{BehaviorEvent, BehaviorSequence, MAX_SEQUENCE};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    /// Node counts per domain.
    pub user_groups: usize,
    pub items: usize,
    pub tags: usize,
    pub categories: usize,
    pub medias: usize,
    pub words: usize,
    pub latent_dim: usize,
    /// Fraction of user groups present in both domains.
    pub user_overlap: f64,
    /// Fraction of tags, categories and words present in both domains.
    pub taxonomy_overlap: f64,
    pub users_per_group: usize,
    /// Inclusive ranges of behaviors per user.
    pub source_behaviors: (usize, usize),
    pub target_train_behaviors: (usize, usize),
    pub target_test_behaviors: (usize, usize),
    /// Popularity of the item at rank `r` (1-based) is `r^-skew`.
    pub popularity_skew: f64,
    /// `β` in `exp(β·u·v)`.
    pub affinity_sharpness: f64,
    /// Events before this fraction of the timeline are train-period.
    pub train_fraction: f64,
    /// Click, like and share: probability and count multiplier.
    pub behavior_mix: [(f64, f64); 3],
    pub strict_cold_start: bool,
    /// Generation fails if fewer test pairs than this clear the median-affinity bar.
    pub min_learnable: f64,
    /// Generation fails if the source interaction distribution is farther
    /// than this (Kolmogorov-Smirnov) from its expected distribution.
    pub max_ks: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            user_groups: 2000,
            items: 5000,
            tags: 200,
            categories: 20,
            medias: 100,
            words: 1000,
            latent_dim: 16,
            user_overlap: 0.5,
            taxonomy_overlap: 0.8,
            users_per_group: 3,
            source_behaviors: (20, 40),
            target_train_behaviors: (2, 5),
            target_test_behaviors: (1, 2),
            popularity_skew: 0.8,
            affinity_sharpness: 6.0,
            train_fraction: 0.8,
            behavior_mix: [(0.75, 1.0), (0.17, 2.0), (0.08, 3.0)],
            strict_cold_start: false,
            min_learnable: 0.9,
            max_ks: 0.05,
        }
    }
}

impl SynthConfig {
    /// A graph of a few dozen nodes per domain, for tests and demos.
    pub fn tiny(seed: u64) -> Self {
        SynthConfig {
            seed,
            user_groups: 4,
            items: 10,
            tags: 4,
            categories: 2,
            medias: 2,
            words: 4,
            latent_dim: 4,
            users_per_group: 2,
            source_behaviors: (4, 6),
            min_learnable: 0.0,
            max_ks: 1.0,
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("infeasible synthetic config: {m}")));
        let counts = [self.user_groups, self.items, self.tags, self.categories, self.medias, self.words];
        if counts.iter().any(|&c| c < 1) || self.latent_dim < 1 || self.users_per_group < 1 {
            return bad("all counts must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.user_overlap) || !(0.0..=1.0).contains(&self.taxonomy_overlap) {
            return bad("overlap fractions must lie in [0, 1]");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        for (lo, hi) in [self.source_behaviors, self.target_train_behaviors, self.target_test_behaviors] {
            if lo > hi || hi == 0 {
                return bad("behavior ranges must be non-empty");
            }
        }
        let p: f64 = self.behavior_mix.iter().map(|b| b.0).sum();
        if (p - 1.0).abs() > 1e-9 || self.behavior_mix.iter().any(|b| b.0 < 0.0 || b.1 <= 0.0) {
            return bad("behavior mix probabilities must sum to 1 with positive multipliers");
        }
        if !(self.popularity_skew >= 0.0 && self.affinity_sharpness >= 0.0) {
            return bad("skew and sharpness must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Profile {
    pub user: String,
    pub gender: String,
    pub age: String,
    pub location: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    /// Fraction of test pairs whose truth item beats the user's median item affinity.
    pub learnable_fraction: f64,
    /// KS distance of source-domain interactions from their expected distribution.
    pub ks_distance: f64,
    pub aligned_groups: usize,
    pub test_instances: usize,
}

/// One edge record before serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRecord {
    pub src: (NodeKind, String),
    pub dst: (NodeKind, String),
    pub count: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub nodes: [Vec<(NodeKind, String)>; 2],
    pub edges: [Vec<EdgeRecord>; 2],
    pub profiles: Vec<Profile>,
    pub tests: Vec<TestInstance>,
    pub report: SynthReport,
}

type Latent = Vec<f64>;

fn unit(v: Latent) -> Latent {
    let n = dot(&v, &v).sqrt();
    if n == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / n).collect()
}

fn gaussian<R: Rng>(rng: &mut R, dim: usize) -> Latent {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `normalize(Σ wᵢ·vᵢ + noise·g)` with `g` a random unit vector.
fn blend<R: Rng>(rng: &mut R, parts: &[(f64, &[f64])], noise: f64, dim: usize) -> Latent {
    let g = unit(gaussian(rng, dim));
    let mut out: Latent = g.iter().map(|x| x * noise).collect();
    for (w, v) in parts {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
    unit(out)
}

fn sample_cum<R: Rng>(rng: &mut R, cum: &[f64]) -> usize {
    let u = rng.gen::<f64>() * cum.last().copied().unwrap_or(0.0);
    cum.partition_point(|&c| c <= u).min(cum.len() - 1)
}

/// A taxonomy entity seen from one domain.
#[derive(Debug, Clone)]
struct Entity {
    id: String,
    latent: Latent,
    /// Index of the parent entity (category for tags and medias, tag for words).
    home: usize,
}

struct DomainWorld {
    categories: Vec<Entity>,
    tags: Vec<Entity>,
    words: Vec<Entity>,
    medias: Vec<Entity>,
    items: Vec<Item>,
    popularity: Vec<f64>,
}

struct Item {
    id: String,
    latent: Latent,
    category: usize,
    tags: Vec<usize>,
    media: usize,
    words: Vec<usize>,
}

fn split_counts(n: usize, overlap: f64) -> (usize, usize) {
    let shared = ((n as f64) * overlap).round() as usize;
    (shared.min(n), n - shared.min(n))
}

/// Shared entities first, then domain-private ones; `parents(shared)` lists
/// the admissible parent indices for a new entity.
fn entities<R: Rng>(
    rng: &mut R,
    kind: &str,
    count: usize,
    overlap: f64,
    shared_pool: &mut Vec<Entity>,
    domain: Domain,
    parents: &[Entity],
    shared_parents: usize,
    noise: f64,
    dim: usize,
) -> Vec<Entity> {
    let (shared, private) = split_counts(count, overlap);
    while shared_pool.len() < shared {
        let i = shared_pool.len();
        let home = rng.gen_range(0..shared_parents.max(1).min(parents.len()));
        let latent = blend(rng, &[(1.0, &parents[home].latent)], noise, dim);
        shared_pool.push(Entity { id: format!("{kind}-{i:05}"), latent, home });
    }
    let mut out: Vec<Entity> = shared_pool[..shared].to_vec();
    let prefix = &domain.as_str()[..1];
    for i in 0..private {
        let home = rng.gen_range(0..parents.len());
        let latent = blend(rng, &[(1.0, &parents[home].latent)], noise, dim);
        out.push(Entity { id: format!("{prefix}-{kind}-{i:05}"), latent, home });
    }
    out
}

fn pick_children<R: Rng>(rng: &mut R, parent: usize, pool: &[Entity], k: usize) -> Vec<usize> {
    let own: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].home == parent).collect();
    let mut out = BTreeSet::new();
    let mut attempts = 0;
    while out.len() < k.min(pool.len()) && attempts < 20 * k {
        attempts += 1;
        let i = if !own.is_empty() && rng.gen_bool(0.8) {
            own[rng.gen_range(0..own.len())]
        } else {
            rng.gen_range(0..pool.len())
        };
        out.insert(i);
    }
    out.into_iter().collect()
}

/// Generates a dataset; fails on an infeasible config or a generator that
/// misses its learnability or popularity bounds.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let dim = cfg.latent_dim;
    let mut r = rng::stream(cfg.seed, &[0x5e, 1]);

    // Taxonomies. Shared categories come first, so shared tags can pick homes
    // that exist in both domains.
    let mut shared_cats = Vec::new();
    let roots: Vec<Entity> = (0..2 * cfg.categories)
        .map(|i| Entity { id: format!("root{i}"), latent: unit(gaussian(&mut r, dim)), home: 0 })
        .collect();
    let (shared_c, _) = split_counts(cfg.categories, cfg.taxonomy_overlap);
    let mut shared_tags = Vec::new();
    let mut shared_words = Vec::new();
    let mut worlds = Vec::with_capacity(2);
    for d in Domain::BOTH {
        let mut r = rng::stream(cfg.seed, &[0x5e, 2, d.index() as u64]);
        // Shared categories reuse roots 0..shared; private ones take fresh roots.
        let mut categories =
            entities(&mut r, "category", cfg.categories, cfg.taxonomy_overlap, &mut shared_cats, d, &roots, roots.len(), 0.0, dim);
        for (i, c) in categories.iter_mut().enumerate().skip(shared_c) {
            let root = &roots[cfg.categories + i.min(cfg.categories - 1)];
            c.latent = blend(&mut r, &[(1.0, &root.latent)], 0.5, dim);
        }
        let tags = entities(&mut r, "tag", cfg.tags, cfg.taxonomy_overlap, &mut shared_tags, d, &categories, shared_c, 0.6, dim);
        let (shared_t, _) = split_counts(cfg.tags, cfg.taxonomy_overlap);
        let words = entities(&mut r, "word", cfg.words, cfg.taxonomy_overlap, &mut shared_words, d, &tags, shared_t, 0.5, dim);
        let medias = entities(&mut r, "media", cfg.medias, 0.0, &mut Vec::new(), d, &categories, 0, 0.5, dim);

        let mut items = Vec::with_capacity(cfg.items);
        let prefix = &d.as_str()[..1];
        for i in 0..cfg.items {
            let category = r.gen_range(0..categories.len());
            let n_tags = r.gen_range(2..=4);
            let tag_ids = pick_children(&mut r, category, &tags, n_tags);
            let medias_here: Vec<usize> = (0..medias.len()).filter(|&m| medias[m].home == category).collect();
            let media = if medias_here.is_empty() {
                r.gen_range(0..medias.len())
            } else {
                medias_here[r.gen_range(0..medias_here.len())]
            };
            let mut word_ids = BTreeSet::new();
            let n_words = r.gen_range(3..=5);
            for _ in 0..n_words {
                let t = tag_ids[r.gen_range(0..tag_ids.len())];
                word_ids.extend(pick_children(&mut r, t, &words, 1));
            }
            let tag_w = 1.0 / tag_ids.len() as f64;
            let mut parts: Vec<(f64, &[f64])> = vec![(0.4, &categories[category].latent)];
            parts.extend(tag_ids.iter().map(|&t| (tag_w, tags[t].latent.as_slice())));
            let latent = blend(&mut r, &parts, 0.3, dim);
            items.push(Item {
                id: format!("{prefix}-item-{i:05}"),
                latent,
                category,
                tags: tag_ids,
                media,
                words: word_ids.into_iter().collect(),
            });
        }
        let mut ranks: Vec<usize> = (0..cfg.items).collect();
        ranks.shuffle(&mut r);
        let popularity = ranks.iter().map(|&k| ((k + 1) as f64).powf(-cfg.popularity_skew)).collect();
        worlds.push(DomainWorld { categories, tags, words, medias, items, popularity });
    }

    // User groups: shared triplets first, then source-only, then target-only.
    let (shared_g, private_g) = split_counts(cfg.user_groups, cfg.user_overlap);
    let total_groups = shared_g + 2 * private_g;
    let ages = ["18-24", "25-30", "31-35", "36-40", "41-45", "46-50", "51-55", "56-60", "61-65", "66+"];
    let locations = total_groups.div_ceil(2 * ages.len()).max(1);
    let mut triplets: Vec<(String, String, String)> = Vec::new();
    for g in ["F", "M"] {
        for a in ages {
            for l in 0..locations {
                triplets.push((g.to_string(), a.to_string(), format!("loc{l:03}")));
            }
        }
    }
    triplets.shuffle(&mut r);
    triplets.truncate(total_groups);
    let cat_latents: Vec<&[f64]> = roots.iter().map(|c| c.latent.as_slice()).collect();
    let group_latents: Vec<Latent> = (0..total_groups)
        .map(|_| {
            let a = cat_latents[r.gen_range(0..cat_latents.len())];
            let b = cat_latents[r.gen_range(0..cat_latents.len())];
            blend(&mut r, &[(1.0, a), (0.5, b)], 0.5, dim)
        })
        .collect();
    let in_domain = |g: usize, d: Domain| g < shared_g || (d == Domain::Source) == (g < shared_g + private_g);
    let group_id = |g: usize| {
        let (x, y, z) = &triplets[g];
        format!("{x}-{y}-{z}")
    };

    let mut profiles = Vec::new();
    let mut users: Vec<(String, usize, Latent)> = Vec::new();
    for (g, gl) in group_latents.iter().enumerate() {
        for k in 0..cfg.users_per_group {
            let id = format!("u{:06}", g * cfg.users_per_group + k);
            let (x, y, z) = triplets[g].clone();
            profiles.push(Profile { user: id.clone(), gender: x, age: y, location: z });
            users.push((id, g, blend(&mut r, &[(1.0, gl)], 0.3, dim)));
        }
    }

    // Behaviors.
    let mut ui: [BTreeMap<(String, usize), f64>; 2] = Default::default();
    let mut ii: [BTreeMap<(usize, usize), f64>; 2] = Default::default();
    let mut expected = vec![0.0; cfg.items];
    let mut observed = vec![0.0; cfg.items];
    let mut tests = Vec::new();
    let mut learnable = (0usize, 0usize);
    let beta = cfg.affinity_sharpness;
    let mix_cum: Vec<f64> = cfg.behavior_mix.iter().scan(0.0, |s, b| {
        *s += b.0;
        Some(*s)
    }).collect();
    for (uid, g, ul) in &users {
        let mut sequences: [Vec<(f64, usize)>; 2] = Default::default();
        let mut truth_items: Vec<(f64, usize)> = Vec::new();
        for d in Domain::BOTH {
            if !in_domain(*g, d) {
                continue;
            }
            let w = &worlds[d.index()];
            let affinity: Vec<f64> = w.items.iter().map(|it| dot(ul, &it.latent)).collect();
            let probs: Vec<f64> = affinity.iter().zip(&w.popularity).map(|(a, p)| p * (beta * a).exp()).collect();
            let z: f64 = probs.iter().sum();
            let cum: Vec<f64> = probs.iter().scan(0.0, |s, p| {
                *s += p;
                Some(*s)
            }).collect();
            let tf = cfg.train_fraction;
            let (lo, hi) = if d == Domain::Source { cfg.source_behaviors } else { cfg.target_train_behaviors };
            let n_train = r.gen_range(lo..=hi);
            for _ in 0..n_train {
                let i = sample_cum(&mut r, &cum);
                let t = r.gen::<f64>() * tf;
                let weight = cfg.behavior_mix[sample_cum(&mut r, &mix_cum)].1;
                *ui[d.index()].entry((uid.clone(), i)).or_insert(0.0) += weight;
                sequences[d.index()].push((t, i));
                if d == Domain::Source {
                    observed[i] += 1.0;
                }
            }
            if d == Domain::Source {
                for (e, p) in expected.iter_mut().zip(&probs) {
                    *e += n_train as f64 * p / z;
                }
            }
            if d == Domain::Target && in_domain(*g, Domain::Source) {
                let (lo, hi) = cfg.target_test_behaviors;
                for _ in 0..r.gen_range(lo..=hi) {
                    let i = sample_cum(&mut r, &cum);
                    truth_items.push((tf + r.gen::<f64>() * (1.0 - tf), i));
                }
                let mut sorted = affinity.clone();
                sorted.sort_by(f64::total_cmp);
                let median = sorted[sorted.len() / 2];
                for &(_, i) in &truth_items {
                    learnable.1 += 1;
                    learnable.0 += usize::from(affinity[i] > median);
                }
            }
            let seq = &mut sequences[d.index()];
            seq.sort_by(|a, b| a.0.total_cmp(&b.0));
            for pair in seq.windows(2) {
                let (a, b) = (pair[0].1, pair[1].1);
                if a != b {
                    *ii[d.index()].entry((a.min(b), a.max(b))).or_insert(0.0) += 1.0;
                }
            }
        }
        if !truth_items.is_empty() && !sequences[0].is_empty() {
            truth_items.sort_by(|a, b| a.0.total_cmp(&b.0));
            let w = &worlds[0];
            let src = &sequences[0];
            let start = src.len().saturating_sub(MAX_SEQUENCE);
            let events = src[start..]
                .iter()
                .map(|&(_, i)| {
                    let it = &w.items[i];
                    let satisf = (0.5 + 0.5 * dot(ul, &it.latent)).clamp(0.0, 1.0);
                    BehaviorEvent {
                        item: it.id.clone(),
                        satisf: (satisf * 1e3).round() / 1e3,
                        tags: it.tags.iter().map(|&t| w.tags[t].id.clone()).collect(),
                        category: vec![w.categories[it.category].id.clone()],
                        media: Some(w.medias[it.media].id.clone()),
                        words: it.words.iter().map(|&x| w.words[x].id.clone()).collect(),
                    }
                })
                .collect();
            let mut truth: Vec<String> = truth_items.iter().map(|&(_, i)| worlds[1].items[i].id.clone()).collect();
            truth.dedup();
            tests.push(TestInstance {
                user: uid.clone(),
                sequence: BehaviorSequence { user_group: group_id(*g), events },
                truth,
                sequence_end: src.last().map(|x| x.0).unwrap_or(0.0),
                test_start: truth_items[0].0,
            });
        }
    }

    let learnable_fraction = if learnable.1 == 0 { 1.0 } else { learnable.0 as f64 / learnable.1 as f64 };
    let ks_distance = ks(&observed, &expected);
    if learnable_fraction < cfg.min_learnable {
        return Err(Error::Config(format!(
            "infeasible synthetic config: only {learnable_fraction:.3} of test pairs are learnable (need {})",
            cfg.min_learnable
        )));
    }
    if ks_distance > cfg.max_ks {
        return Err(Error::Config(format!(
            "infeasible synthetic config: interaction KS distance {ks_distance:.4} exceeds {}",
            cfg.max_ks
        )));
    }

    // Records.
    let mut nodes: [Vec<(NodeKind, String)>; 2] = Default::default();
    let mut edges: [Vec<EdgeRecord>; 2] = Default::default();
    for d in Domain::BOTH {
        let w = &worlds[d.index()];
        let list = &mut nodes[d.index()];
        list.extend((0..total_groups).filter(|&g| in_domain(g, d)).map(|g| (NodeKind::User, group_id(g))));
        list.extend(w.items.iter().map(|i| (NodeKind::Item, i.id.clone())));
        for (kind, ents) in
            [(NodeKind::Tag, &w.tags), (NodeKind::Category, &w.categories), (NodeKind::Media, &w.medias), (NodeKind::Word, &w.words)]
        {
            list.extend(ents.iter().map(|e| (kind, e.id.clone())));
        }
        list.sort();

        let out = &mut edges[d.index()];
        let item_key = |i: usize| (NodeKind::Item, w.items[i].id.clone());
        for ((u, i), c) in &ui[d.index()] {
            out.push(EdgeRecord { src: (NodeKind::User, u.clone()), dst: item_key(*i), count: *c });
        }
        for ((a, b), c) in &ii[d.index()] {
            out.push(EdgeRecord { src: item_key(*a), dst: item_key(*b), count: *c });
        }
        for it in &w.items {
            let ik = (NodeKind::Item, it.id.clone());
            let mut attr = |k: NodeKind, id: &str| out.push(EdgeRecord { src: (k, id.to_string()), dst: ik.clone(), count: 1.0 });
            for &t in &it.tags {
                attr(NodeKind::Tag, &w.tags[t].id);
            }
            attr(NodeKind::Category, &w.categories[it.category].id);
            attr(NodeKind::Media, &w.medias[it.media].id);
            for &x in &it.words {
                attr(NodeKind::Word, &w.words[x].id);
            }
        }
    }

    let report = SynthReport { learnable_fraction, ks_distance, aligned_groups: shared_g, test_instances: tests.len() };
    let mut data = SynthDataset { nodes, edges, profiles, tests, report };
    if cfg.strict_cold_start {
        data = strict_cold_start_transform(&data);
    }
    Ok(data)
}

/// Largest gap between the cumulative observed and expected distributions,
/// items in index order.
fn ks(observed: &[f64], expected: &[f64]) -> f64 {
    let (so, se): (f64, f64) = (observed.iter().sum(), expected.iter().sum());
    if so == 0.0 || se == 0.0 {
        return 0.0;
    }
    let (mut co, mut ce, mut worst) = (0.0, 0.0, 0.0f64);
    for (o, e) in observed.iter().zip(expected) {
        co += o / so;
        ce += e / se;
        worst = worst.max((co - ce).abs());
    }
    worst
}

/// Drops every target-domain behavior edge (U-I and I-I). Test instances are unchanged.
pub fn strict_cold_start_transform(data: &SynthDataset) -> SynthDataset {
    let mut out = data.clone();
    out.edges[Domain::Target.index()].retain(|e| {
        !matches!(EdgeKind::between(e.src.0, e.dst.0), Some(EdgeKind::UI) | Some(EdgeKind::II))
    });
    out
}

impl SynthDataset {
    pub fn nodes_tsv(&self) -> String {
        let mut s = String::new();
        for d in Domain::BOTH {
            for (k, id) in &self.nodes[d.index()] {
                s.push_str(&format!("{k}\t{id}\t{d}\n"));
            }
        }
        s
    }

    pub fn edges_tsv(&self, d: Domain) -> String {
        let mut s = String::new();
        for e in &self.edges[d.index()] {
            s.push_str(&format!("{}\t{}\t{}\t{}\t{}\t{d}\n", e.src.0, e.src.1, e.dst.0, e.dst.1, e.count));
        }
        s
    }

    pub fn profiles_tsv(&self) -> String {
        self.profiles.iter().map(|p| format!("{}\t{}\t{}\t{}\n", p.user, p.gender, p.age, p.location)).collect()
    }

    pub fn tests_jsonl(&self) -> Result<String> {
        tests_jsonl(&self.tests)
    }

    /// Writes `nodes.tsv`, `edges.source.tsv`, `edges.target.tsv`,
    /// `profiles.tsv`, `test_instances.jsonl` and `synth_report.json`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("nodes.tsv"), self.nodes_tsv().as_bytes())?;
        for d in Domain::BOTH {
            write_atomic(&dir.join(format!("edges.{d}.tsv")), self.edges_tsv(d).as_bytes())?;
        }
        write_atomic(&dir.join("profiles.tsv"), self.profiles_tsv().as_bytes())?;
        write_atomic(&dir.join("test_instances.jsonl"), self.tests_jsonl()?.as_bytes())?;
        let mut report = serde_json::to_vec_pretty(&self.report)?;
        report.push(b'\n');
        write_atomic(&dir.join("synth_report.json"), &report)
    }
}

pub fn tests_jsonl(tests: &[TestInstance]) -> Result<String> {
    let mut buf = Vec::new();
    for t in tests {
        serde_json::to_writer(&mut buf, t)?;
        buf.write_all(b"\n")?;
    }
    Ok(String::from_utf8(buf).expect("JSON is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&SynthConfig::tiny(3)).unwrap();
        let b = generate(&SynthConfig::tiny(3)).unwrap();
        assert_eq!(a.nodes_tsv(), b.nodes_tsv());
        assert_eq!(a.edges_tsv(Domain::Target), b.edges_tsv(Domain::Target));
        assert_eq!(a.tests_jsonl().unwrap(), b.tests_jsonl().unwrap());
    }

    #[test]
    fn zero_overlap_shares_no_ids() {
        let cfg = SynthConfig { user_overlap: 0.0, taxonomy_overlap: 0.0, ..SynthConfig::tiny(1) };
        let d = generate(&cfg).unwrap();
        let s: BTreeSet<_> = d.nodes[0].iter().collect();
        assert!(d.nodes[1].iter().all(|n| !s.contains(n)));
        assert!(d.tests.is_empty());
    }

    #[test]
    fn strict_transform_is_idempotent_and_source_preserving() {
        let d = generate(&SynthConfig::tiny(2)).unwrap();
        let once = strict_cold_start_transform(&d);
        assert_eq!(strict_cold_start_transform(&once), once);
        assert_eq!(once.edges[0], d.edges[0]);
        assert_eq!(once.tests, d.tests);
        assert!(once.edges[1].iter().all(|e| e.src.0 != NodeKind::User && e.dst.0 != NodeKind::User));
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let cfg = SynthConfig { user_overlap: 1.5, ..SynthConfig::tiny(1) };
        assert!(generate(&cfg).is_err());
        let cfg = SynthConfig { items: 0, ..SynthConfig::tiny(1) };
        assert!(generate(&cfg).is_err());
    }
}
