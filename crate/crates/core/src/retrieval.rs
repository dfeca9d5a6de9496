//! Exact top-K item indexes and six-channel cross-domain matching.
//!
//! Every anchor (a source-domain item, tag, category, media or word, or a
//! target-domain user group) keeps its `K` nearest target items by cosine.
//! Matching reads similarities only from these lists: an item can score in a
//! channel only if it sits in the relevant anchor's list.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NodeKind;
use crate::linalg::{dot, norm};

pub const DEFAULT_K: usize = 100;
pub const TOP_N: usize = 500;
pub const MAX_SEQUENCE: usize = 200;
pub const RECENCY_DECAY: f64 = 0.95;

/// `0.95^(n-j)` for 1-based position `j` in a sequence of length `n`.
pub fn recency(j: usize, n: usize) -> f64 {
    RECENCY_DECAY.powi((n - j) as i32)
}

/// Per anchor, the nearest target items with cosine scores, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    k: usize,
    /// Target item ids in canonical order; lists refer to positions here.
    items: Vec<String>,
    lists: BTreeMap<(NodeKind, String), Vec<(u32, f64)>>,
}

/// Sort key: score descending, then canonical item order.
fn rank(a: &(u32, f64), b: &(u32, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

fn top_k(mut scored: Vec<(u32, f64)>, k: usize) -> Vec<(u32, f64)> {
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank);
        scored.truncate(k);
    }
    scored.sort_by(rank);
    scored
}

impl RetrievalIndex {
    /// Brute-force exact index. `items` must be sorted by id. Zero-norm
    /// anchors and items are skipped; their names are returned as warnings.
    pub fn build(
        anchors: &[(NodeKind, String, &[f64])],
        items: &[(String, &[f64])],
        k: usize,
        threads: usize,
    ) -> Result<(Self, Vec<String>)> {
        if k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if items.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("index items must be sorted and unique".into()));
        }
        let mut warnings = Vec::new();
        let mut unit: Vec<(u32, Vec<f64>)> = Vec::with_capacity(items.len());
        for (i, (id, v)) in items.iter().enumerate() {
            let n = norm(v);
            if n == 0.0 {
                warnings.push(format!("item {id} has a zero-norm embedding; excluded from the index"));
                continue;
            }
            unit.push((i as u32, v.iter().map(|x| x / n).collect()));
        }
        let score = |a: &[f64]| -> Option<Vec<(u32, f64)>> {
            let n = norm(a);
            if n == 0.0 {
                return None;
            }
            let scored = unit.iter().map(|(i, u)| (*i, dot(a, u) / n)).collect();
            Some(top_k(scored, k))
        };
        let threads = threads.max(1);
        let chunk = anchors.len().div_ceil(threads).max(1);
        let results: Vec<Option<Vec<(u32, f64)>>> = std::thread::scope(|s| {
            let handles: Vec<_> = anchors
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|a| score(a.2)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("index worker panicked")).collect()
        });
        let mut lists = BTreeMap::new();
        for ((kind, id, _), list) in anchors.iter().zip(results) {
            match list {
                Some(l) => {
                    lists.insert((*kind, id.clone()), l);
                }
                None => warnings.push(format!("anchor {kind}:{id} has a zero-norm embedding; skipped")),
            }
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        let index = RetrievalIndex { k, items: items.iter().map(|(id, _)| id.clone()).collect(), lists };
        Ok((index, warnings))
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn anchor_count(&self) -> usize {
        self.lists.len()
    }

    pub fn list(&self, kind: NodeKind, id: &str) -> Option<&[(u32, f64)]> {
        self.lists.get(&(kind, id.to_string())).map(|v| v.as_slice())
    }

    /// The list with item ids resolved.
    pub fn named_list(&self, kind: NodeKind, id: &str) -> Option<Vec<(&str, f64)>> {
        self.list(kind, id).map(|l| l.iter().map(|&(i, s)| (self.items[i as usize].as_str(), s)).collect())
    }

    /// Header line then one record per anchor; scores at 6 decimals.
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "# k={} anchors={} items={}", self.k, self.lists.len(), self.items.len())?;
        for item in &self.items {
            writeln!(w, "# item\t{item}")?;
        }
        for ((kind, id), list) in &self.lists {
            write!(w, "{kind}\t{id}\t")?;
            for (n, (i, s)) in list.iter().enumerate() {
                if n > 0 {
                    write!(w, ",")?;
                }
                write!(w, "{}:{:.6}", self.items[*i as usize], s)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let header = match lines.next() {
            Some((_, l)) => l?,
            None => return Err(Error::malformed(1, "empty index file")),
        };
        let k = header
            .split_whitespace()
            .find_map(|f| f.strip_prefix("k=").and_then(|v| v.parse().ok()))
            .ok_or_else(|| Error::malformed(1, "index header lacks k="))?;
        let mut items = Vec::new();
        let mut by_id: HashMap<String, u32> = HashMap::new();
        let mut lists = BTreeMap::new();
        for (i, line) in lines {
            let line_no = i + 1;
            let text = line?;
            if let Some(item) = text.strip_prefix("# item\t") {
                by_id.insert(item.to_string(), items.len() as u32);
                items.push(item.to_string());
                continue;
            }
            if text.trim().is_empty() || text.starts_with('#') {
                continue;
            }
            let mut f = text.splitn(3, '\t');
            let (kind, id, rest) = match (f.next(), f.next(), f.next()) {
                (Some(k), Some(i), Some(r)) => (k, i, r),
                _ => return Err(Error::malformed(line_no, "expected 3 fields")),
            };
            let kind = NodeKind::parse(kind).ok_or_else(|| Error::malformed(line_no, format!("bad kind {kind:?}")))?;
            let mut list = Vec::new();
            for entry in rest.split(',').filter(|e| !e.is_empty()) {
                let (item, score) =
                    entry.rsplit_once(':').ok_or_else(|| Error::malformed(line_no, format!("bad entry {entry:?}")))?;
                let idx = *by_id.get(item).ok_or_else(|| Error::malformed(line_no, format!("unknown item {item:?}")))?;
                let score: f64 = score.parse().map_err(|_| Error::malformed(line_no, format!("bad score {score:?}")))?;
                list.push((idx, score));
            }
            lists.insert((kind, id.to_string()), list);
        }
        Ok(RetrievalIndex { k, items, lists })
    }
}

fn one_or_many<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(String),
        Many(Vec<String>),
    }
    Ok(match Option::<OneOrMany>::deserialize(d)? {
        None => Vec::new(),
        Some(OneOrMany::One(s)) => vec![s],
        Some(OneOrMany::Many(v)) => v,
    })
}

fn default_satisf() -> f64 {
    1.0
}

/// One behavior: a source-domain item and its attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorEvent {
    pub item: String,
    #[serde(default = "default_satisf")]
    pub satisf: f64,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default, deserialize_with = "one_or_many")]
    pub category: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media: Option<String>,
    #[serde(default)]
    pub words: Vec<String>,
}

impl BehaviorEvent {
    pub fn new(item: impl Into<String>) -> Self {
        BehaviorEvent { item: item.into(), satisf: 1.0, tags: vec![], category: vec![], media: None, words: vec![] }
    }

    fn attributes(&self, kind: NodeKind) -> &[String] {
        match kind {
            NodeKind::Item => std::slice::from_ref(&self.item),
            NodeKind::Tag => &self.tags,
            NodeKind::Category => &self.category,
            NodeKind::Media => self.media.as_slice(),
            NodeKind::Word => &self.words,
            NodeKind::User => &[],
        }
    }
}

/// A user's behaviors, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSequence {
    pub user_group: String,
    pub events: Vec<BehaviorEvent>,
}

impl BehaviorSequence {
    /// Keeps the most recent [`MAX_SEQUENCE`] events and checks `satisf`.
    pub fn normalized(mut self) -> Result<Self> {
        if let Some(e) = self.events.iter().find(|e| !(0.0..=1.0).contains(&e.satisf)) {
            return Err(Error::Config(format!("satisf {} of item {} outside [0, 1]", e.satisf, e.item)));
        }
        if self.events.len() > MAX_SEQUENCE {
            self.events.drain(..self.events.len() - MAX_SEQUENCE);
        }
        Ok(self)
    }
}

/// The six channels, in breakdown order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    User,
    Item,
    Tag,
    Category,
    Media,
    Word,
}

impl Channel {
    pub const ALL: [Channel; 6] = [Channel::User, Channel::Item, Channel::Tag, Channel::Category, Channel::Media, Channel::Word];

    pub fn kind(self) -> NodeKind {
        match self {
            Channel::User => NodeKind::User,
            Channel::Item => NodeKind::Item,
            Channel::Tag => NodeKind::Tag,
            Channel::Category => NodeKind::Category,
            Channel::Media => NodeKind::Media,
            Channel::Word => NodeKind::Word,
        }
    }

    pub fn parse(s: &str) -> Option<Channel> {
        NodeKind::parse(s).map(|k| Channel::ALL[k.index()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelWeights(pub [f64; 6]);

impl Default for ChannelWeights {
    fn default() -> Self {
        ChannelWeights([1.0; 6])
    }
}

impl ChannelWeights {
    pub fn set(&mut self, c: Channel, w: f64) {
        self.0[c as usize] = w;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchOptions {
    pub weights: ChannelWeights,
    pub top_n: usize,
    /// Drop items whose id appears in the user's own sequence.
    pub filter_history: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions { weights: ChannelWeights::default(), top_n: TOP_N, filter_history: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub item: String,
    pub score: f64,
    /// Weighted channel contributions in [`Channel::ALL`] order; sums to `score`.
    pub breakdown: [f64; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub items: Vec<ScoredItem>,
    /// Candidate insertions across all channels, an upper bound on the
    /// distinct items touched.
    pub candidates: usize,
    /// Sequence entries with no index list.
    pub missing: Vec<String>,
}

/// Raw (unweighted) scores of one channel, by item position.
pub type ChannelScores = BTreeMap<u32, f64>;

/// `s_i^u`: the user group's list, or nothing for an unknown group.
pub fn user_channel(group: &str, index: &RetrievalIndex) -> ChannelScores {
    index.list(NodeKind::User, group).map(|l| l.iter().copied().collect()).unwrap_or_default()
}

/// Item channel (`kind = Item`) or one attribute channel. For each event the
/// attribute lists are summed, the `K` best items kept, and the result added
/// with weight `satisf · recency`. Also returns candidate insertions and
/// missing anchors.
pub fn sequence_channel(seq: &BehaviorSequence, index: &RetrievalIndex, kind: NodeKind) -> (ChannelScores, usize, Vec<String>) {
    let n = seq.events.len();
    let mut scores = ChannelScores::new();
    let mut candidates = 0;
    let mut missing = Vec::new();
    let mut per_event: BTreeMap<u32, f64> = BTreeMap::new();
    for (j0, e) in seq.events.iter().enumerate() {
        let w = e.satisf * recency(j0 + 1, n);
        per_event.clear();
        for attr in e.attributes(kind) {
            match index.list(kind, attr) {
                Some(list) => {
                    for &(i, s) in list {
                        *per_event.entry(i).or_insert(0.0) += s;
                    }
                }
                None => missing.push(format!("{kind}:{attr}")),
            }
        }
        let kept = top_k(per_event.iter().map(|(&i, &s)| (i, s)).collect(), index.k);
        candidates += kept.len();
        for (i, s) in kept {
            *scores.entry(i).or_insert(0.0) += s * w;
        }
    }
    (scores, candidates, missing)
}

pub fn item_channel(seq: &BehaviorSequence, index: &RetrievalIndex) -> ChannelScores {
    sequence_channel(seq, index, NodeKind::Item).0
}

pub fn taxonomy_channel(seq: &BehaviorSequence, index: &RetrievalIndex, kind: NodeKind) -> Result<ChannelScores> {
    if !matches!(kind, NodeKind::Tag | NodeKind::Category | NodeKind::Media | NodeKind::Word) {
        return Err(Error::Config(format!("{kind} is not a taxonomy channel")));
    }
    Ok(sequence_channel(seq, index, kind).0)
}

/// Combines the six channels and keeps the best `top_n` items.
pub fn match_sequence(seq: &BehaviorSequence, index: &RetrievalIndex, opts: &MatchOptions) -> MatchResult {
    let mut channels: Vec<ChannelScores> = Vec::with_capacity(6);
    let user = user_channel(&seq.user_group, index);
    let mut candidates = user.len();
    let mut missing = Vec::new();
    channels.push(user);
    for c in &Channel::ALL[1..] {
        let (s, cand, miss) = sequence_channel(seq, index, c.kind());
        candidates += cand;
        missing.extend(miss);
        channels.push(s);
    }
    for m in &missing {
        log::debug!("no index list for {m}");
    }

    let mut breakdowns: BTreeMap<u32, [f64; 6]> = BTreeMap::new();
    for (c, scores) in channels.iter().enumerate() {
        let w = opts.weights.0[c];
        for (&i, &s) in scores {
            breakdowns.entry(i).or_insert([0.0; 6])[c] = w * s;
        }
    }
    let history: std::collections::HashSet<&str> =
        if opts.filter_history { seq.events.iter().map(|e| e.item.as_str()).collect() } else { Default::default() };
    let mut ranked: Vec<(u32, f64, [f64; 6])> = breakdowns
        .into_iter()
        .filter(|(i, _)| !history.contains(index.items[*i as usize].as_str()))
        .map(|(i, b)| (i, b.iter().sum(), b))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(opts.top_n);
    MatchResult {
        items: ranked
            .into_iter()
            .map(|(i, score, breakdown)| ScoredItem { item: index.items[i as usize].clone(), score, breakdown })
            .collect(),
        candidates,
        missing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index_of(items: &[(&str, Vec<f64>)], anchors: &[(NodeKind, &str, Vec<f64>)], k: usize) -> RetrievalIndex {
        let items: Vec<(String, &[f64])> = items.iter().map(|(i, v)| (i.to_string(), v.as_slice())).collect();
        let anchors: Vec<(NodeKind, String, &[f64])> =
            anchors.iter().map(|(k, i, v)| (*k, i.to_string(), v.as_slice())).collect();
        RetrievalIndex::build(&anchors, &items, k, 1).unwrap().0
    }

    #[test]
    fn recency_values() {
        assert_eq!(recency(5, 5), 1.0);
        assert_eq!(recency(4, 5), 0.95);
        assert!((recency(3, 5) - 0.9025).abs() < 1e-15);
    }

    #[test]
    fn small_corpus_and_self_similarity() {
        let items = [("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0]), ("c", vec![1.0, 1.0])];
        let idx = index_of(&items, &[(NodeKind::Item, "x", vec![0.0, 2.0])], 100);
        let l = idx.named_list(NodeKind::Item, "x").unwrap();
        assert_eq!(l.len(), 3);
        assert_eq!(l[0], ("b", 1.0));
        assert_eq!(l[2].0, "a");
    }

    #[test]
    fn ties_break_by_item_id() {
        let items = [("a", vec![1.0, 0.0]), ("b", vec![1.0, 0.0]), ("c", vec![0.0, 1.0])];
        let idx = index_of(&items, &[(NodeKind::Tag, "t", vec![1.0, 0.0])], 2);
        let l = idx.named_list(NodeKind::Tag, "t").unwrap();
        assert_eq!(l.iter().map(|x| x.0).collect::<Vec<_>>(), ["a", "b"]);
    }

    #[test]
    fn zero_norm_anchor_is_skipped() {
        let items = [("a", vec![1.0, 0.0])];
        let items: Vec<(String, &[f64])> = items.iter().map(|(i, v)| (i.to_string(), v.as_slice())).collect();
        let zero = [0.0, 0.0];
        let (idx, warnings) =
            RetrievalIndex::build(&[(NodeKind::Item, "z".into(), &zero)], &items, 10, 1).unwrap();
        assert_eq!(idx.anchor_count(), 0);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn empty_sequence_and_absent_group() {
        let items = [("a", vec![1.0, 0.0])];
        let idx = index_of(&items, &[(NodeKind::Item, "x", vec![1.0, 0.0])], 10);
        let seq = BehaviorSequence { user_group: "nobody".into(), events: vec![] };
        assert!(item_channel(&seq, &idx).is_empty());
        assert!(user_channel("nobody", &idx).is_empty());
        let r = match_sequence(&seq, &idx, &MatchOptions::default());
        assert!(r.items.is_empty());
        assert_eq!(r.candidates, 0);
    }

    #[test]
    fn sequence_json_accepts_scalar_category() {
        let s: BehaviorSequence = serde_json::from_str(
            r#"{"user_group":"M-25-x","events":[{"item":"i1","tags":["t"],"category":"c","media":"m"}]}"#,
        )
        .unwrap();
        assert_eq!(s.events[0].category, vec!["c".to_string()]);
        assert_eq!(s.events[0].satisf, 1.0);
    }

    #[test]
    fn index_file_round_trip() {
        let items = [("a", vec![1.0, 0.0]), ("b", vec![0.5, 1.0])];
        let idx = index_of(&items, &[(NodeKind::Word, "w", vec![1.0, 0.25]), (NodeKind::User, "g", vec![0.0, 1.0])], 5);
        let mut buf = Vec::new();
        idx.write(&mut buf).unwrap();
        let back = RetrievalIndex::read(buf.as_slice()).unwrap();
        assert_eq!(back.items(), idx.items());
        for (k, id) in [(NodeKind::Word, "w"), (NodeKind::User, "g")] {
            let (a, b) = (idx.list(k, id).unwrap(), back.list(k, id).unwrap());
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.0, y.0);
                assert!((x.1 - y.1).abs() <= 5e-7);
            }
        }
    }
}
