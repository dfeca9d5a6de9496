use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;

use super::{Domain, EdgeKind, LoadReport, Network, NodeKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NodeLine {
    pub kind: NodeKind,
    pub id: String,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeLine {
    pub src: (NodeKind, String),
    pub dst: (NodeKind, String),
    pub kind: EdgeKind,
    pub raw_count: f64,
    pub domain: Domain,
}

fn is_skippable(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with('#')
}

fn field<'a>(fields: &[&'a str], i: usize, line: usize, what: &str) -> Result<&'a str> {
    fields
        .get(i)
        .copied()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::malformed(line, format!("missing {what}")))
}

fn parse_kind(s: &str, line: usize) -> Result<NodeKind> {
    NodeKind::parse(s).ok_or_else(|| Error::malformed(line, format!("unknown node kind {s:?}")))
}

fn parse_domain(s: &str, line: usize) -> Result<Domain> {
    Domain::parse(s).ok_or_else(|| Error::malformed(line, format!("unknown domain {s:?}")))
}

/// Parses `kind<TAB>external_id<TAB>domain`.
pub fn parse_node_line(text: &str, line: usize) -> Result<NodeLine> {
    let fields: Vec<&str> = text.trim_end_matches(['\r', '\n']).split('\t').collect();
    if fields.len() != 3 {
        return Err(Error::malformed(line, format!("expected 3 fields, found {}", fields.len())));
    }
    Ok(NodeLine {
        kind: parse_kind(field(&fields, 0, line, "kind")?, line)?,
        id: field(&fields, 1, line, "external id")?.to_string(),
        domain: parse_domain(field(&fields, 2, line, "domain")?, line)?,
    })
}

/// Parses `src_kind<TAB>src_id<TAB>dst_kind<TAB>dst_id<TAB>raw_count<TAB>domain`.
pub fn parse_edge_line(text: &str, line: usize) -> Result<EdgeLine> {
    let fields: Vec<&str> = text.trim_end_matches(['\r', '\n']).split('\t').collect();
    if fields.len() != 6 {
        return Err(Error::malformed(line, format!("expected 6 fields, found {}", fields.len())));
    }
    let src_kind = parse_kind(field(&fields, 0, line, "source kind")?, line)?;
    let src_id = field(&fields, 1, line, "source id")?.to_string();
    let dst_kind = parse_kind(field(&fields, 2, line, "destination kind")?, line)?;
    let dst_id = field(&fields, 3, line, "destination id")?.to_string();
    let count_text = field(&fields, 4, line, "raw count")?;
    let raw_count: f64 = count_text
        .parse()
        .map_err(|_| Error::malformed(line, format!("bad count {count_text:?}")))?;
    let domain = parse_domain(field(&fields, 5, line, "domain")?, line)?;
    let kind = EdgeKind::between(src_kind, dst_kind).ok_or_else(|| Error::IllegalKindPair {
        line,
        a: src_kind.to_string(),
        b: dst_kind.to_string(),
    })?;
    if !(raw_count > 0.0 && raw_count.is_finite()) {
        return Err(Error::NonPositiveCount { line, count: raw_count });
    }
    if src_kind == dst_kind && src_id == dst_id {
        return Err(Error::malformed(line, "self-loop edge"));
    }
    Ok(EdgeLine { src: (src_kind, src_id), dst: (dst_kind, dst_id), kind, raw_count, domain })
}

/// Loads one domain's network from `nodes.tsv` and `edges.tsv` streams.
///
/// Records of the other domain are skipped. Duplicate edge records are summed;
/// U-I edges whose summed count is below `min_ui_count` are dropped.
pub fn load_network<N: BufRead, E: BufRead>(
    nodes: N,
    edges: E,
    domain: Domain,
    min_ui_count: f64,
) -> Result<(Network, LoadReport)> {
    load_network_grouped(nodes, edges, domain, min_ui_count, &BTreeMap::new())
}

/// [`load_network`] for edge files that name raw users: user endpoints found
/// in `groups` are replaced by their group id before merging, so the U-I
/// threshold applies to group-level counts.
pub fn load_network_grouped<N: BufRead, E: BufRead>(
    nodes: N,
    edges: E,
    domain: Domain,
    min_ui_count: f64,
    groups: &BTreeMap<String, String>,
) -> Result<(Network, LoadReport)> {
    let mut report = LoadReport::default();
    let mut declared: Vec<(NodeKind, String)> = Vec::new();
    for (i, line) in nodes.lines().enumerate() {
        let line_no = i + 1;
        let text = line?;
        if is_skippable(&text) {
            continue;
        }
        let rec = parse_node_line(&text, line_no)?;
        if rec.domain != domain {
            report.skipped_other_domain += 1;
            continue;
        }
        declared.push((rec.kind, rec.id));
    }
    let known: HashSet<(NodeKind, String)> = declared.iter().cloned().collect();

    let mut merged: BTreeMap<((NodeKind, String), (NodeKind, String)), (EdgeKind, f64)> = BTreeMap::new();
    for (i, line) in edges.lines().enumerate() {
        let line_no = i + 1;
        let text = line?;
        if is_skippable(&text) {
            continue;
        }
        let mut rec = parse_edge_line(&text, line_no)?;
        if rec.domain != domain {
            report.skipped_other_domain += 1;
            continue;
        }
        for end in [&mut rec.src, &mut rec.dst] {
            if end.0 == NodeKind::User {
                if let Some(g) = groups.get(&end.1) {
                    end.1 = g.clone();
                }
            }
        }
        for end in [&rec.src, &rec.dst] {
            if !known.contains(end) {
                return Err(Error::UndeclaredNode { line: line_no, node: format!("{}:{}", end.0, end.1) });
            }
        }
        let pair = if rec.src <= rec.dst { (rec.src, rec.dst) } else { (rec.dst, rec.src) };
        let slot = merged.entry(pair).or_insert((rec.kind, 0.0));
        if slot.1 > 0.0 {
            report.merged_duplicates += 1;
        }
        slot.1 += rec.raw_count;
    }

    let mut kept = Vec::with_capacity(merged.len());
    for ((u, v), (kind, count)) in merged {
        if kind == EdgeKind::UI && count < min_ui_count {
            report.dropped_ui += 1;
            continue;
        }
        kept.push((u, v, count));
    }
    let net = Network::from_parts(domain, declared, kept)?;
    Ok((net, report))
}

const UNKNOWN: &str = "unknown";

/// Maps raw user ids to `gender-age-location` user-group ids. Missing
/// attributes become `unknown`.
pub fn build_user_groups<R: BufRead>(profiles: R) -> Result<BTreeMap<String, String>> {
    let mut groups = BTreeMap::new();
    for (i, line) in profiles.lines().enumerate() {
        let text = line?;
        if is_skippable(&text) {
            continue;
        }
        let fields: Vec<&str> = text.trim_end_matches(['\r', '\n']).split('\t').collect();
        let user = field(&fields, 0, i + 1, "raw user id")?;
        let attr = |j: usize| -> &str {
            match fields.get(j).map(|s| s.trim()) {
                Some(s) if !s.is_empty() => s,
                _ => UNKNOWN,
            }
        };
        groups.insert(user.to_string(), format!("{}-{}-{}", attr(1), attr(2), attr(3)));
    }
    Ok(groups)
}
