//! Glue between the stages: loading datasets, embedding, indexing,
//! evaluating and the ablation matrix.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RetrievalConfig;
use crate::error::{Error, Result};
use crate::eval::{metrics_of, match_all, run_eval, AblationRow, EvalMode, EvalReport, TestInstance};
use crate::graph::{aligned_nodes, build_user_groups, load_network_grouped, AlignedNodeSet, Domain, LoadReport, Network, NodeKind};
use crate::model::Model;
use crate::retrieval::RetrievalIndex;
use crate::synth::SynthDataset;
use crate::training::{train, TrainerConfig};

/// Both weighted networks, their alignment and the test instances.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub source: Network,
    pub target: Network,
    pub aligned: AlignedNodeSet,
    pub tests: Vec<TestInstance>,
    pub reports: [LoadReport; 2],
}

pub fn read_tests<R: BufRead>(r: R) -> Result<Vec<TestInstance>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TestInstance =
            serde_json::from_str(&line).map_err(|e| Error::malformed(i + 1, format!("bad test instance: {e}")))?;
        out.push(TestInstance { sequence: t.sequence.normalized()?, ..t });
    }
    Ok(out)
}

impl Dataset {
    /// Builds both networks from TSV text. `edges` may hold one stream per
    /// domain or a single stream for both.
    pub fn from_text(
        nodes: &str,
        edges: &[&str],
        profiles: &str,
        tests: Vec<TestInstance>,
        min_ui_count: f64,
        smoothing: f64,
    ) -> Result<Self> {
        let groups = build_user_groups(profiles.as_bytes())?;
        let all_edges: String = edges.concat();
        let load = |d: Domain| -> Result<(Network, LoadReport)> {
            let (mut net, report) = load_network_grouped(nodes.as_bytes(), all_edges.as_bytes(), d, min_ui_count, &groups)?;
            net.compute_edge_weights(smoothing)?;
            net.validate()?;
            Ok((net, report))
        };
        let (source, rs) = load(Domain::Source)?;
        let (target, rt) = load(Domain::Target)?;
        let aligned = aligned_nodes(&source, &target);
        Ok(Dataset { source, target, aligned, tests, reports: [rs, rt] })
    }

    pub fn from_synth(data: &SynthDataset, min_ui_count: f64, smoothing: f64) -> Result<Self> {
        let edges = [data.edges_tsv(Domain::Source), data.edges_tsv(Domain::Target)];
        Self::from_text(
            &data.nodes_tsv(),
            &[&edges[0], &edges[1]],
            &data.profiles_tsv(),
            data.tests.clone(),
            min_ui_count,
            smoothing,
        )
    }

    /// Reads `nodes.tsv`, `edges.tsv` or `edges.{source,target}.tsv`, and
    /// optionally `profiles.tsv` and `test_instances.jsonl`.
    pub fn load_dir(dir: &Path, min_ui_count: f64, smoothing: f64) -> Result<Self> {
        let read = |name: &str| std::fs::read_to_string(dir.join(name));
        let nodes = read("nodes.tsv")?;
        let edges: Vec<String> = if dir.join("edges.tsv").exists() {
            vec![read("edges.tsv")?]
        } else {
            vec![read("edges.source.tsv")?, read("edges.target.tsv")?]
        };
        let profiles = if dir.join("profiles.tsv").exists() { read("profiles.tsv")? } else { String::new() };
        let tests_path = dir.join("test_instances.jsonl");
        let tests = if tests_path.exists() {
            read_tests(std::io::BufReader::new(std::fs::File::open(tests_path)?))?
        } else {
            Vec::new()
        };
        let refs: Vec<&str> = edges.iter().map(|s| s.as_str()).collect();
        Self::from_text(&nodes, &refs, &profiles, tests, min_ui_count, smoothing)
    }

    pub fn net(&self, d: Domain) -> &Network {
        match d {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    /// Canonical `nodes.tsv` and `edges.tsv` for both domains.
    pub fn canonical_tsv(&self) -> Result<(String, String)> {
        let (mut nodes, mut edges) = (Vec::new(), Vec::new());
        for net in [&self.source, &self.target] {
            net.write_nodes_tsv(&mut nodes)?;
            net.write_edges_tsv(&mut edges)?;
        }
        Ok((String::from_utf8(nodes).expect("UTF-8"), String::from_utf8(edges).expect("UTF-8")))
    }
}

/// Index anchors: source items and attributes, plus target user groups that
/// have behavior edges.
const SOURCE_ANCHORS: [NodeKind; 5] = [NodeKind::Item, NodeKind::Tag, NodeKind::Category, NodeKind::Media, NodeKind::Word];

/// Embeds both domains and builds the exact index over target items.
pub fn build_index(
    model: &Model,
    source: &Network,
    target: &Network,
    k: usize,
    seed: u64,
    threads: usize,
) -> Result<(RetrievalIndex, Vec<String>)> {
    let es = model.embed_all(source, seed);
    let et = model.embed_all(target, seed);
    let mut anchors: Vec<(NodeKind, String, &[f64])> = Vec::new();
    for kind in SOURCE_ANCHORS {
        for &n in source.nodes_of_kind(kind) {
            anchors.push((kind, source.node_key(n).1.to_string(), es.row(n.ix())));
        }
    }
    for &n in target.nodes_of_kind(NodeKind::User) {
        if target.degree(n) > 0 {
            anchors.push((NodeKind::User, target.node_key(n).1.to_string(), et.row(n.ix())));
        }
    }
    let items: Vec<(String, &[f64])> = target
        .nodes_of_kind(NodeKind::Item)
        .iter()
        .map(|&n| (target.node_key(n).1.to_string(), et.row(n.ix())))
        .collect();
    RetrievalIndex::build(&anchors, &items, k, threads)
}

/// Named ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoIntra,
    NoInter,
    NoInterUser,
    NoInterTaxonomy,
    NoInterNeighbor,
    /// Both contrastive families off.
    NoContrast,
    /// Untrained, randomly initialized encoders.
    FrozenRandom,
}

impl Variant {
    pub const TABLE: [Variant; 6] = [
        Variant::Full,
        Variant::NoIntra,
        Variant::NoInter,
        Variant::NoInterUser,
        Variant::NoInterTaxonomy,
        Variant::NoInterNeighbor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoIntra => "w/o intra-CL",
            Variant::NoInter => "w/o inter-CL",
            Variant::NoInterUser => "w/o L_inter_u",
            Variant::NoInterTaxonomy => "w/o L_inter_t",
            Variant::NoInterNeighbor => "w/o L_inter_n",
            Variant::NoContrast => "w/o CL",
            Variant::FrozenRandom => "frozen random",
        }
    }

    /// Parses the CLI's `--ablate` values.
    pub fn parse(s: &str) -> Option<Variant> {
        Some(match s {
            "full" => Variant::Full,
            "intra" => Variant::NoIntra,
            "inter" => Variant::NoInter,
            "inter_u" => Variant::NoInterUser,
            "inter_t" => Variant::NoInterTaxonomy,
            "inter_n" => Variant::NoInterNeighbor,
            "cl" => Variant::NoContrast,
            "random" => Variant::FrozenRandom,
            _ => return None,
        })
    }

    /// The user-based task cannot run without target user behaviors.
    pub fn applies(self, mode: EvalMode) -> bool {
        !(self == Variant::NoInterUser && mode == EvalMode::StrictColdStart)
    }

    pub fn configure(self, base: &TrainerConfig) -> TrainerConfig {
        let mut c = base.clone();
        match self {
            Variant::Full | Variant::FrozenRandom => {}
            Variant::NoIntra => c.loss.lambda[2] = 0.0,
            Variant::NoInter => c.loss.lambda[3] = 0.0,
            Variant::NoInterUser => c.loss.inter_user = false,
            Variant::NoInterTaxonomy => c.loss.inter_taxonomy = false,
            Variant::NoInterNeighbor => c.loss.inter_neighbor = false,
            Variant::NoContrast => {
                c.loss.lambda[2] = 0.0;
                c.loss.lambda[3] = 0.0;
            }
        }
        c
    }
}

/// Trains (unless frozen) and evaluates one variant.
pub fn evaluate_variant(
    data: &Dataset,
    base: &TrainerConfig,
    retrieval: &RetrievalConfig,
    mode: EvalMode,
    variant: Variant,
    threads: usize,
) -> Result<EvalReport> {
    let mut cfg = variant.configure(base);
    cfg.strict_cold_start = mode == EvalMode::StrictColdStart;
    let model = if variant == Variant::FrozenRandom {
        cfg.validate()?;
        let mut m = Model::init(&data.source, &data.target, cfg.model, cfg.seed);
        m.round_to_f32();
        m
    } else {
        train(&data.source, &data.target, &data.aligned, &cfg)?.model
    };
    let (index, _) = build_index(&model, &data.source, &data.target, retrieval.k, cfg.seed, threads)?;
    run_eval(&index, &data.target, &data.tests, mode, &retrieval.matching, threads)
}

/// One report whose rows are the requested variants, each trained from the
/// same seed. Variants that do not apply in `mode` get an N/A row.
pub fn run_ablations(
    data: &Dataset,
    base: &TrainerConfig,
    retrieval: &RetrievalConfig,
    mode: EvalMode,
    variants: &[Variant],
    threads: usize,
) -> Result<EvalReport> {
    if data.tests.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mut rows = Vec::new();
    let mut head: Option<EvalReport> = None;
    for &v in variants {
        if !v.applies(mode) {
            rows.push(AblationRow { name: v.name().to_string(), metrics: None });
            continue;
        }
        log::info!("ablation {} ({})", v.name(), mode.as_str());
        let r = evaluate_variant(data, base, retrieval, mode, v, threads)?;
        rows.push(AblationRow { name: v.name().to_string(), metrics: Some(r.metrics.clone()) });
        head.get_or_insert(r);
    }
    let mut report = head.ok_or_else(|| Error::Config("no applicable ablation variant".into()))?;
    report.rows = rows;
    Ok(report)
}

/// Metrics computed from an index without the strict-mode guard; used by
/// tests that compare against oracles.
pub fn metrics_for(index: &RetrievalIndex, data: &Dataset, retrieval: &RetrievalConfig) -> Result<crate::eval::Metrics> {
    let results = match_all(&data.tests, index, &retrieval.matching, 1);
    metrics_of(&results, &data.tests, data.target.nodes_of_kind(NodeKind::Item).len())
}

/// Per-kind counts for build reports.
pub fn kind_counts(net: &Network) -> BTreeMap<String, usize> {
    NodeKind::ALL.iter().map(|k| (k.as_str().to_string(), net.nodes_of_kind(*k).len())).collect()
}
