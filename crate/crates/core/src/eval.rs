//! HIT@N and item coverage over a test set, and the report formats.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeKind, Network, NodeKind};
use crate::retrieval::{match_sequence, BehaviorSequence, MatchOptions, MatchResult, RetrievalIndex};

pub const HIT_CUTOFFS: [usize; 4] = [50, 100, 200, 500];

/// A source-domain behavior sequence and the target items the user went on
/// to interact with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestInstance {
    pub user: String,
    pub sequence: BehaviorSequence,
    pub truth: Vec<String>,
    /// Time of the last sequence event and of the first truth event.
    pub sequence_end: f64,
    pub test_start: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    FewShot,
    StrictColdStart,
}

impl EvalMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "few_shot" => Some(EvalMode::FewShot),
            "strict_cold_start" => Some(EvalMode::StrictColdStart),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::FewShot => "few_shot",
            EvalMode::StrictColdStart => "strict_cold_start",
        }
    }
}

/// Fraction of (instance, truth item) pairs whose item is in the instance's top `n`.
pub fn hit_at_n(results: &[MatchResult], truths: &[Vec<String>], n: usize) -> Result<f64> {
    if results.len() != truths.len() {
        return Err(Error::LengthMismatch(format!("{} results but {} truth lists", results.len(), truths.len())));
    }
    let mut hits = 0usize;
    let mut pairs = 0usize;
    for (r, t) in results.iter().zip(truths) {
        let top: HashSet<&str> = r.items.iter().take(n).map(|s| s.item.as_str()).collect();
        pairs += t.len();
        hits += t.iter().filter(|i| top.contains(i.as_str())).count();
    }
    if pairs == 0 {
        return Err(Error::EmptyTestSet);
    }
    Ok(hits as f64 / pairs as f64)
}

/// Distinct items across all result lists over the corpus size.
pub fn item_coverage(results: &[MatchResult], corpus_size: usize) -> Result<f64> {
    if corpus_size == 0 {
        return Err(Error::Config("empty item corpus".into()));
    }
    let distinct: HashSet<&str> = results.iter().flat_map(|r| r.items.iter().map(|s| s.item.as_str())).collect();
    Ok(distinct.len() as f64 / corpus_size as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// HIT@N keyed by N.
    pub hit: BTreeMap<usize, f64>,
    pub coverage: f64,
}

impl Metrics {
    pub fn hit_at(&self, n: usize) -> f64 {
        self.hit.get(&n).copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    /// `None` when the variant does not apply in this mode.
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub instances: usize,
    pub pairs: usize,
    pub metrics: Metrics,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rows: Vec<AblationRow>,
}

/// Strict cold-start guard: the target network must carry no behavior edges
/// and no sequence may contain a target-domain item.
pub fn check_leakage(target: &Network, tests: &[TestInstance]) -> Result<()> {
    for kind in [EdgeKind::UI, EdgeKind::II] {
        if target.has_edges(kind) {
            return Err(Error::Leakage(format!("target network contains {kind:?} behavior edges")));
        }
    }
    for t in tests {
        if let Some(e) = t.sequence.events.iter().find(|e| target.id_of(NodeKind::Item, &e.item).is_some()) {
            return Err(Error::Leakage(format!("sequence of user {} contains target item {}", t.user, e.item)));
        }
    }
    Ok(())
}

/// Matches every instance (in parallel over `threads`, order preserved).
pub fn match_all(tests: &[TestInstance], index: &RetrievalIndex, opts: &MatchOptions, threads: usize) -> Vec<MatchResult> {
    let threads = threads.max(1);
    let chunk = tests.len().div_ceil(threads).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = tests
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|t| match_sequence(&t.sequence, index, opts)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("match worker panicked")).collect()
    })
}

pub fn metrics_of(results: &[MatchResult], tests: &[TestInstance], corpus_size: usize) -> Result<Metrics> {
    let truths: Vec<Vec<String>> = tests.iter().map(|t| t.truth.clone()).collect();
    let mut hit = BTreeMap::new();
    for n in HIT_CUTOFFS {
        hit.insert(n, hit_at_n(results, &truths, n)?);
    }
    Ok(Metrics { hit, coverage: item_coverage(results, corpus_size)? })
}

/// Evaluates one index on a test set.
pub fn run_eval(
    index: &RetrievalIndex,
    target: &Network,
    tests: &[TestInstance],
    mode: EvalMode,
    opts: &MatchOptions,
    threads: usize,
) -> Result<EvalReport> {
    if tests.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    if mode == EvalMode::StrictColdStart {
        check_leakage(target, tests)?;
    }
    let results = match_all(tests, index, opts, threads);
    let corpus = target.nodes_of_kind(NodeKind::Item).len();
    let metrics = metrics_of(&results, tests, corpus)?;
    Ok(EvalReport {
        mode,
        instances: tests.len(),
        pairs: tests.iter().map(|t| t.truth.len()).sum(),
        metrics,
        rows: Vec::new(),
    })
}

impl EvalReport {
    /// Aligned text table: the main metrics, then one line per ablation row.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode: {}  instances: {}  pairs: {}", self.mode.as_str(), self.instances, self.pairs);
        let _ = write!(out, "{:<22}", "variant");
        for n in HIT_CUTOFFS {
            let _ = write!(out, "{:>10}", format!("HIT@{n}"));
        }
        let _ = writeln!(out, "{:>10}", "coverage");
        let mut line = |name: &str, m: Option<&Metrics>| {
            let _ = write!(out, "{name:<22}");
            match m {
                Some(m) => {
                    for n in HIT_CUTOFFS {
                        let _ = write!(out, "{:>10.4}", m.hit_at(n));
                    }
                    let _ = writeln!(out, "{:>10.4}", m.coverage);
                }
                None => {
                    for _ in 0..5 {
                        let _ = write!(out, "{:>10}", "N/A");
                    }
                    let _ = writeln!(out);
                }
            }
        };
        if self.rows.is_empty() {
            line("model", Some(&self.metrics));
        }
        for r in &self.rows {
            line(&r.name, r.metrics.as_ref());
        }
        out
    }

    /// Ablation matrix as CSV; N/A rows keep empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,mode,hit@50,hit@100,hit@200,hit@500,coverage\n");
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.name, self.mode.as_str());
            match &r.metrics {
                Some(m) => {
                    for n in HIT_CUTOFFS {
                        let _ = write!(out, ",{:.6}", m.hit_at(n));
                    }
                    let _ = writeln!(out, ",{:.6}", m.coverage);
                }
                None => {
                    let _ = writeln!(out, ",N/A,N/A,N/A,N/A,N/A");
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::ScoredItem;

    fn result(items: &[&str]) -> MatchResult {
        MatchResult {
            items: items.iter().map(|i| ScoredItem { item: i.to_string(), score: 1.0, breakdown: [0.0; 6] }).collect(),
            candidates: 0,
            missing: vec![],
        }
    }

    fn truth(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn hit_counting() {
        let rs = vec![result(&["a"]), result(&["b"]), result(&["c"]), result(&["d"])];
        let ts = vec![truth(&["a"]), truth(&["x"]), truth(&["c"]), truth(&["y"])];
        assert_eq!(hit_at_n(&rs, &ts, 50).unwrap(), 0.5);
        let all = vec![truth(&["a"]), truth(&["b"]), truth(&["c"]), truth(&["d"])];
        assert_eq!(hit_at_n(&rs, &all, 50).unwrap(), 1.0);
        let none = vec![truth(&["q"]); 4];
        assert_eq!(hit_at_n(&rs, &none, 50).unwrap(), 0.0);
    }

    #[test]
    fn hit_is_micro_averaged() {
        let rs = vec![result(&["a", "b"]), result(&["c"])];
        let ts = vec![truth(&["a", "b", "z"]), truth(&["q"])];
        assert_eq!(hit_at_n(&rs, &ts, 10).unwrap(), 0.5);
        assert_eq!(hit_at_n(&rs, &ts, 1).unwrap(), 0.25);
    }

    #[test]
    fn coverage_counts_distinct_items() {
        let rs = vec![result(&["a", "b"]), result(&["a", "b"])];
        assert_eq!(item_coverage(&rs, 4).unwrap(), 0.5);
        let rs = vec![result(&["a", "b"]), result(&["c", "d"])];
        assert_eq!(item_coverage(&rs, 4).unwrap(), 1.0);
    }
}
