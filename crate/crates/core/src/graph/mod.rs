//! Per-domain heterogeneous preference networks.
//!
//! A network holds six node kinds (user groups, items, tags, categories,
//! medias, words) and six undirected, item-centred edge kinds. Nodes are kept
//! in canonical `(kind, external_id)` order so that a node's dense index is a
//! stable identity across reloads.

mod io;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{build_user_groups, load_network, load_network_grouped, parse_edge_line, parse_node_line, EdgeLine, NodeLine};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    User,
    Item,
    Tag,
    Category,
    Media,
    Word,
}

impl NodeKind {
    pub const ALL: [NodeKind; 6] = [
        NodeKind::User,
        NodeKind::Item,
        NodeKind::Tag,
        NodeKind::Category,
        NodeKind::Media,
        NodeKind::Word,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::User => "user",
            NodeKind::Item => "item",
            NodeKind::Tag => "tag",
            NodeKind::Category => "category",
            NodeKind::Media => "media",
            NodeKind::Word => "word",
        }
    }

    pub fn parse(s: &str) -> Option<NodeKind> {
        NodeKind::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Kinds that carry the same meaning in both domains.
    pub fn is_alignable(self) -> bool {
        matches!(self, NodeKind::User | NodeKind::Tag | NodeKind::Category | NodeKind::Word)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub const BOTH: [Domain; 2] = [Domain::Source, Domain::Target];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Option<Domain> {
        match s {
            "source" => Some(Domain::Source),
            "target" => Some(Domain::Target),
            _ => None,
        }
    }

    pub fn other(self) -> Domain {
        match self {
            Domain::Source => Domain::Target,
            Domain::Target => Domain::Source,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Globally unique node identity.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeRef {
    pub kind: NodeKind,
    pub id: String,
    pub domain: Domain,
}

impl NodeRef {
    pub fn new(kind: NodeKind, id: impl Into<String>, domain: Domain) -> Self {
        NodeRef { kind, id: id.into(), domain }
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}@{}", self.kind, self.id, self.domain)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EdgeKind {
    UI,
    II,
    TI,
    CI,
    MI,
    WI,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 6] =
        [EdgeKind::UI, EdgeKind::II, EdgeKind::TI, EdgeKind::CI, EdgeKind::MI, EdgeKind::WI];

    /// The only legal edge kind between two node kinds, if any.
    pub fn between(a: NodeKind, b: NodeKind) -> Option<EdgeKind> {
        use NodeKind::*;
        let other = match (a, b) {
            (Item, Item) => return Some(EdgeKind::II),
            (Item, o) | (o, Item) => o,
            _ => return None,
        };
        match other {
            User => Some(EdgeKind::UI),
            Tag => Some(EdgeKind::TI),
            Category => Some(EdgeKind::CI),
            Media => Some(EdgeKind::MI),
            Word => Some(EdgeKind::WI),
            Item => unreachable!(),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Dense index of a node inside one [`Network`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    #[inline]
    pub fn ix(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adjacent {
    pub node: NodeId,
    pub kind: EdgeKind,
    pub weight: f64,
}

/// An undirected edge stored once with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: NodeId,
    pub b: NodeId,
    pub kind: EdgeKind,
    pub raw_count: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub dropped_ui: usize,
    pub skipped_other_domain: usize,
    pub merged_duplicates: usize,
    pub warnings: Vec<String>,
}

/// One domain's diversified preference network.
#[derive(Debug, Clone)]
pub struct Network {
    domain: Domain,
    nodes: Vec<(NodeKind, String)>,
    lookup: HashMap<(NodeKind, String), NodeId>,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<Adjacent>>,
    cumulative: Vec<Vec<f64>>,
    by_kind: [Vec<NodeId>; 6],
}

impl Network {
    /// Builds a network from declared nodes and already-validated edges. Edge
    /// weights start equal to raw counts.
    pub fn from_parts(
        domain: Domain,
        mut nodes: Vec<(NodeKind, String)>,
        edges: impl IntoIterator<Item = ((NodeKind, String), (NodeKind, String), f64)>,
    ) -> Result<Self> {
        nodes.sort();
        nodes.dedup();
        let lookup: HashMap<_, _> =
            nodes.iter().enumerate().map(|(i, k)| (k.clone(), NodeId(i as u32))).collect();

        let mut merged: BTreeMap<(NodeId, NodeId, EdgeKind), f64> = BTreeMap::new();
        for (u, v, count) in edges {
            let kind = EdgeKind::between(u.0, v.0).ok_or_else(|| Error::IllegalKindPair {
                line: 0,
                a: u.0.to_string(),
                b: v.0.to_string(),
            })?;
            let a = *lookup
                .get(&u)
                .ok_or_else(|| Error::UndeclaredNode { line: 0, node: format!("{}:{}", u.0, u.1) })?;
            let b = *lookup
                .get(&v)
                .ok_or_else(|| Error::UndeclaredNode { line: 0, node: format!("{}:{}", v.0, v.1) })?;
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            *merged.entry((a, b, kind)).or_insert(0.0) += count;
        }
        let edges = merged
            .into_iter()
            .map(|((a, b, kind), raw_count)| Edge { a, b, kind, raw_count, weight: raw_count })
            .collect();
        Ok(Self::assemble(domain, nodes, lookup, edges))
    }

    fn assemble(
        domain: Domain,
        nodes: Vec<(NodeKind, String)>,
        lookup: HashMap<(NodeKind, String), NodeId>,
        edges: Vec<Edge>,
    ) -> Self {
        let mut by_kind: [Vec<NodeId>; 6] = Default::default();
        for (i, (kind, _)) in nodes.iter().enumerate() {
            by_kind[kind.index()].push(NodeId(i as u32));
        }
        let mut net = Network {
            domain,
            adjacency: vec![Vec::new(); nodes.len()],
            cumulative: vec![Vec::new(); nodes.len()],
            nodes,
            lookup,
            edges,
            by_kind,
        };
        net.rebuild_adjacency();
        net
    }

    fn rebuild_adjacency(&mut self) {
        for adj in &mut self.adjacency {
            adj.clear();
        }
        for e in &self.edges {
            self.adjacency[e.a.ix()].push(Adjacent { node: e.b, kind: e.kind, weight: e.weight });
            self.adjacency[e.b.ix()].push(Adjacent { node: e.a, kind: e.kind, weight: e.weight });
        }
        for (adj, cum) in self.adjacency.iter_mut().zip(self.cumulative.iter_mut()) {
            adj.sort_by(|x, y| x.node.cmp(&y.node).then(x.kind.cmp(&y.kind)));
            cum.clear();
            let mut total = 0.0;
            for a in adj.iter() {
                total += a.weight;
                cum.push(total);
            }
        }
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_key(&self, id: NodeId) -> (NodeKind, &str) {
        let (k, s) = &self.nodes[id.ix()];
        (*k, s.as_str())
    }

    pub fn kind(&self, id: NodeId) -> NodeKind {
        self.nodes[id.ix()].0
    }

    pub fn node_ref(&self, id: NodeId) -> NodeRef {
        let (k, s) = &self.nodes[id.ix()];
        NodeRef::new(*k, s.clone(), self.domain)
    }

    pub fn id_of(&self, kind: NodeKind, external_id: &str) -> Option<NodeId> {
        // Owned key avoids a custom Borrow impl; lookups are not on the hot path.
        self.lookup.get(&(kind, external_id.to_string())).copied()
    }

    pub fn resolve(&self, node: &NodeRef) -> Option<NodeId> {
        if node.domain != self.domain {
            return None;
        }
        self.id_of(node.kind, &node.id)
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len() as u32).map(NodeId)
    }

    pub fn nodes_of_kind(&self, kind: NodeKind) -> &[NodeId] {
        &self.by_kind[kind.index()]
    }

    pub fn neighbors(&self, id: NodeId) -> &[Adjacent] {
        &self.adjacency[id.ix()]
    }

    pub fn degree(&self, id: NodeId) -> usize {
        self.adjacency[id.ix()].len()
    }

    pub fn is_neighbor(&self, a: NodeId, b: NodeId) -> bool {
        self.adjacency[a.ix()].binary_search_by(|x| x.node.cmp(&b)).is_ok()
    }

    /// Weight of the edge between `a` and `b` (summed over kinds; at most one
    /// kind is legal per pair).
    pub fn weight(&self, a: NodeId, b: NodeId) -> Option<f64> {
        let adj = &self.adjacency[a.ix()];
        let ws: Vec<f64> = adj.iter().filter(|x| x.node == b).map(|x| x.weight).collect();
        if ws.is_empty() {
            None
        } else {
            Some(ws.iter().sum())
        }
    }

    pub fn has_edges(&self, kind: EdgeKind) -> bool {
        self.edges.iter().any(|e| e.kind == kind)
    }

    /// Nodes with at least one neighbor.
    pub fn connected_nodes(&self) -> Vec<NodeId> {
        self.node_ids().filter(|&n| self.degree(n) > 0).collect()
    }

    /// Replaces raw-count weights with per-kind normalized PMI weights.
    ///
    /// `weight(u,v) = max(ln(c(u,v)·C / (c(u)·c(v))), smoothing)` where counts
    /// are taken within the edge's kind, then each kind is rescaled to mean 1.
    pub fn compute_edge_weights(&mut self, smoothing: f64) -> Result<()> {
        if !(smoothing > 0.0 && smoothing.is_finite()) {
            return Err(Error::Config(format!("smoothing must be positive, got {smoothing}")));
        }
        let mut total = [0.0f64; 6];
        let mut marginal: Vec<[f64; 6]> = vec![[0.0; 6]; self.nodes.len()];
        for e in &self.edges {
            let k = e.kind.index();
            total[k] += e.raw_count;
            marginal[e.a.ix()][k] += e.raw_count;
            marginal[e.b.ix()][k] += e.raw_count;
        }
        let mut sum = [0.0f64; 6];
        let mut count = [0usize; 6];
        for e in &mut self.edges {
            let k = e.kind.index();
            let (ca, cb) = (marginal[e.a.ix()][k], marginal[e.b.ix()][k]);
            for (c, n) in [(ca, e.a), (cb, e.b)] {
                if c <= 0.0 {
                    let (kind, id) = &self.nodes[n.ix()];
                    return Err(Error::ZeroMarginal(format!("{kind}:{id}")));
                }
            }
            let pmi = (e.raw_count * total[k] / (ca * cb)).ln();
            e.weight = pmi.max(smoothing);
            sum[k] += e.weight;
            count[k] += 1;
        }
        for e in &mut self.edges {
            let k = e.kind.index();
            e.weight /= sum[k] / count[k] as f64;
        }
        self.rebuild_adjacency();
        Ok(())
    }

    /// Draws `fanout` neighbors with replacement, proportional to edge weight.
    /// Isolated nodes return `fanout` copies of themselves.
    pub fn sample_neighbors<R: Rng + ?Sized>(&self, node: NodeId, fanout: usize, rng: &mut R) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(fanout);
        self.sample_neighbors_into(node, fanout, rng, &mut out);
        out
    }

    pub fn sample_neighbors_into<R: Rng + ?Sized>(
        &self,
        node: NodeId,
        fanout: usize,
        rng: &mut R,
        out: &mut Vec<NodeId>,
    ) {
        out.clear();
        let adj = &self.adjacency[node.ix()];
        if adj.is_empty() {
            out.extend(std::iter::repeat_n(node, fanout));
            return;
        }
        let cum = &self.cumulative[node.ix()];
        let total = *cum.last().unwrap();
        for _ in 0..fanout {
            let u = rng.gen::<f64>() * total;
            let pos = cum.partition_point(|&c| c <= u).min(adj.len() - 1);
            out.push(adj[pos].node);
        }
    }

    /// One neighbor, weighted; `None` for isolated nodes.
    pub fn sample_one_neighbor<R: Rng + ?Sized>(&self, node: NodeId, rng: &mut R) -> Option<NodeId> {
        let adj = &self.adjacency[node.ix()];
        if adj.is_empty() {
            return None;
        }
        let cum = &self.cumulative[node.ix()];
        let u = rng.gen::<f64>() * cum.last().unwrap();
        Some(adj[cum.partition_point(|&c| c <= u).min(adj.len() - 1)].node)
    }

    /// Checks the structural invariants: symmetric adjacency, positive finite
    /// weights, kinds consistent with endpoints.
    pub fn validate(&self) -> Result<()> {
        for e in &self.edges {
            if !(e.weight > 0.0 && e.weight.is_finite()) {
                return Err(Error::Config(format!("non-positive weight {} on edge", e.weight)));
            }
            if EdgeKind::between(self.kind(e.a), self.kind(e.b)) != Some(e.kind) {
                return Err(Error::Config("edge kind inconsistent with endpoints".into()));
            }
        }
        for n in self.node_ids() {
            for adj in self.neighbors(n) {
                let back = self.neighbors(adj.node).iter().any(|b| b.node == n && b.weight == adj.weight);
                if !back {
                    return Err(Error::Config("asymmetric adjacency".into()));
                }
            }
        }
        Ok(())
    }

    /// Canonical text form: nodes then edges, in `nodes.tsv`/`edges.tsv` syntax.
    pub fn write_nodes_tsv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        for (kind, id) in &self.nodes {
            writeln!(w, "{kind}\t{id}\t{}", self.domain)?;
        }
        Ok(())
    }

    pub fn write_edges_tsv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        for e in &self.edges {
            // Non-item endpoint first, otherwise canonical order.
            let (s, d) = if self.kind(e.a) == NodeKind::Item && self.kind(e.b) != NodeKind::Item {
                (e.b, e.a)
            } else {
                (e.a, e.b)
            };
            let (sk, sid) = self.node_key(s);
            let (dk, did) = self.node_key(d);
            writeln!(w, "{sk}\t{sid}\t{dk}\t{did}\t{}\t{}", e.raw_count, self.domain)?;
        }
        Ok(())
    }

    /// Removes every edge of the given kinds.
    pub fn without_edge_kinds(&self, kinds: &[EdgeKind]) -> Network {
        let edges = self.edges.iter().filter(|e| !kinds.contains(&e.kind)).copied().collect();
        Self::assemble(self.domain, self.nodes.clone(), self.lookup.clone(), edges)
    }
}

/// Node keys present in both domains, restricted to alignable kinds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedNodeSet {
    pub entries: Vec<(NodeKind, String)>,
}

/// An aligned key resolved to its node in each domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignedPair {
    pub kind: NodeKind,
    pub source: NodeId,
    pub target: NodeId,
}

impl AlignedNodeSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, kind: NodeKind, id: &str) -> bool {
        self.entries
            .binary_search_by(|(k, s)| (k, s.as_str()).cmp(&(&kind, id)))
            .is_ok()
    }

    /// Resolves every entry against the source and target networks.
    pub fn resolve(&self, source: &Network, target: &Network) -> Vec<AlignedPair> {
        self.entries
            .iter()
            .filter_map(|(kind, id)| {
                Some(AlignedPair { kind: *kind, source: source.id_of(*kind, id)?, target: target.id_of(*kind, id)? })
            })
            .collect()
    }
}

pub fn aligned_nodes(a: &Network, b: &Network) -> AlignedNodeSet {
    let entries = a
        .nodes
        .iter()
        .filter(|(kind, id)| kind.is_alignable() && b.lookup.contains_key(&(*kind, id.clone())))
        .cloned()
        .collect();
    AlignedNodeSet { entries }
}
