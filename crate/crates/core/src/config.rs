//! Flat `key = value` configuration shared by every pipeline stage.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NodeKind;
use crate::losses::NeighborLossForm;
use crate::retrieval::{Channel, MatchOptions, DEFAULT_K};
use crate::synth::SynthConfig;
use crate::training::{OptimizerKind, TrainerConfig};

/// Index and matching settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k: usize,
    pub matching: MatchOptions,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { k: DEFAULT_K, matching: MatchOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Settings {
    pub trainer: TrainerConfig,
    pub retrieval: RetrievalConfig,
    pub synth: SynthConfig,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::malformed(i + 1, "expected `key = value`"))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::malformed(i + 1, "empty key"));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn range(key: &str, v: &str) -> Result<(usize, usize)> {
    let (a, b) = v.split_once("..").ok_or_else(|| Error::Config(format!("{key}: expected `lo..hi`, got {v:?}")))?;
    Ok((num(key, a.trim())?, num(key, b.trim())?))
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut s = Settings::default();
        for (k, v) in parse_pairs(&text)? {
            s.apply(&k, &v)?;
        }
        Ok(s)
    }

    /// Sets one key. Unknown keys are an error.
    pub fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.trainer;
        let l = &mut t.loss;
        let m = &mut t.model;
        let r = &mut self.retrieval;
        let s = &mut self.synth;
        match key {
            "optimizer" => {
                t.optimizer = OptimizerKind::parse(v).ok_or_else(|| Error::Config(format!("unknown optimizer {v:?}")))?
            }
            "learning_rate" => t.learning_rate = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "steps_per_epoch" => t.steps_per_epoch = if v == "auto" { None } else { Some(num(key, v)?) },
            "seed" => {
                t.seed = num(key, v)?;
                s.seed = t.seed;
            }
            "gradient_clip_norm" => t.gradient_clip_norm = num(key, v)?,
            "strict_cold_start" => {
                t.strict_cold_start = flag(key, v)?;
                s.strict_cold_start = t.strict_cold_start;
            }
            "edge_smoothing" => t.edge_smoothing = num(key, v)?,
            "min_ui_count" => t.min_ui_count = num(key, v)?,
            "batch_size" => l.batch_size = num(key, v)?,
            "negatives" => l.negatives = num(key, v)?,
            "tau" => l.tau = num(key, v)?,
            "positives_per_anchor" => l.positives_per_anchor = num(key, v)?,
            "hops" => l.hops = num(key, v)?,
            "lambda1" => l.lambda[0] = num(key, v)?,
            "lambda2" => l.lambda[1] = num(key, v)?,
            "lambda3" => l.lambda[2] = num(key, v)?,
            "lambda4" => l.lambda[3] = num(key, v)?,
            "neighbor_loss" => {
                l.neighbor_form = match v {
                    "sgns" => NeighborLossForm::Sgns,
                    "literal" => NeighborLossForm::Literal,
                    _ => return Err(Error::Config(format!("neighbor_loss: expected sgns or literal, got {v:?}"))),
                }
            }
            "inter_user" => l.inter_user = flag(key, v)?,
            "inter_taxonomy" => l.inter_taxonomy = flag(key, v)?,
            "inter_neighbor" => l.inter_neighbor = flag(key, v)?,
            "d_in" => m.d_in = num(key, v)?,
            "hidden" => m.hidden = num(key, v)?,
            "d_out" => m.d_out = num(key, v)?,
            "fanout_outer" => m.fanouts.outer = num(key, v)?,
            "fanout_inner" => m.fanouts.inner = num(key, v)?,
            "k" => r.k = num(key, v)?,
            "top_n" => r.matching.top_n = num(key, v)?,
            "filter_history" => r.matching.filter_history = flag(key, v)?,
            "synth.user_groups" => s.user_groups = num(key, v)?,
            "synth.items" => s.items = num(key, v)?,
            "synth.tags" => s.tags = num(key, v)?,
            "synth.categories" => s.categories = num(key, v)?,
            "synth.medias" => s.medias = num(key, v)?,
            "synth.words" => s.words = num(key, v)?,
            "synth.latent_dim" => s.latent_dim = num(key, v)?,
            "synth.user_overlap" => s.user_overlap = num(key, v)?,
            "synth.taxonomy_overlap" => s.taxonomy_overlap = num(key, v)?,
            "synth.users_per_group" => s.users_per_group = num(key, v)?,
            "synth.source_behaviors" => s.source_behaviors = range(key, v)?,
            "synth.target_train_behaviors" => s.target_train_behaviors = range(key, v)?,
            "synth.target_test_behaviors" => s.target_test_behaviors = range(key, v)?,
            "synth.popularity_skew" => s.popularity_skew = num(key, v)?,
            "synth.affinity_sharpness" => s.affinity_sharpness = num(key, v)?,
            "synth.train_fraction" => s.train_fraction = num(key, v)?,
            "synth.min_learnable" => s.min_learnable = num(key, v)?,
            "synth.max_ks" => s.max_ks = num(key, v)?,
            _ => {
                if let Some(kind) = key.strip_prefix("tau.") {
                    let kind = NodeKind::parse(kind).ok_or_else(|| Error::Config(format!("unknown node kind in {key}")))?;
                    l.tau_by_kind.insert(kind, num(key, v)?);
                } else if let Some(c) = key.strip_prefix("channel_weight.") {
                    let c = Channel::parse(c).ok_or_else(|| Error::Config(format!("unknown channel in {key}")))?;
                    r.matching.weights.set(c, num(key, v)?);
                } else {
                    return Err(Error::Config(format!("unknown configuration key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Every key with its current value, in file syntax.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let t = &self.trainer;
        let l = &t.loss;
        let m = &t.model;
        let r = &self.retrieval;
        let s = &self.synth;
        let b = |x: bool| x.to_string();
        let mut out: Vec<(&str, String)> = vec![
            ("optimizer", format!("{:?}", t.optimizer).to_lowercase()),
            ("learning_rate", t.learning_rate.to_string()),
            ("epochs", t.epochs.to_string()),
            ("steps_per_epoch", t.steps_per_epoch.map_or("auto".to_string(), |v| v.to_string())),
            ("seed", t.seed.to_string()),
            ("gradient_clip_norm", t.gradient_clip_norm.to_string()),
            ("strict_cold_start", b(t.strict_cold_start)),
            ("edge_smoothing", t.edge_smoothing.to_string()),
            ("min_ui_count", t.min_ui_count.to_string()),
            ("batch_size", l.batch_size.to_string()),
            ("negatives", l.negatives.to_string()),
            ("tau", l.tau.to_string()),
            ("positives_per_anchor", l.positives_per_anchor.to_string()),
            ("hops", l.hops.to_string()),
            ("lambda1", l.lambda[0].to_string()),
            ("lambda2", l.lambda[1].to_string()),
            ("lambda3", l.lambda[2].to_string()),
            ("lambda4", l.lambda[3].to_string()),
            ("neighbor_loss", if l.neighbor_form == NeighborLossForm::Sgns { "sgns" } else { "literal" }.to_string()),
            ("inter_user", b(l.inter_user)),
            ("inter_taxonomy", b(l.inter_taxonomy)),
            ("inter_neighbor", b(l.inter_neighbor)),
            ("d_in", m.d_in.to_string()),
            ("hidden", m.hidden.to_string()),
            ("d_out", m.d_out.to_string()),
            ("fanout_outer", m.fanouts.outer.to_string()),
            ("fanout_inner", m.fanouts.inner.to_string()),
            ("k", r.k.to_string()),
            ("top_n", r.matching.top_n.to_string()),
            ("filter_history", b(r.matching.filter_history)),
        ];
        let mut owned: Vec<(String, String)> = out.drain(..).map(|(k, v)| (k.to_string(), v)).collect();
        for (kind, tau) in &l.tau_by_kind {
            owned.push((format!("tau.{kind}"), tau.to_string()));
        }
        for c in Channel::ALL {
            owned.push((format!("channel_weight.{}", c.kind()), r.matching.weights.0[c as usize].to_string()));
        }
        let range = |(a, b): (usize, usize)| format!("{a}..{b}");
        for (k, v) in [
            ("user_groups", s.user_groups.to_string()),
            ("items", s.items.to_string()),
            ("tags", s.tags.to_string()),
            ("categories", s.categories.to_string()),
            ("medias", s.medias.to_string()),
            ("words", s.words.to_string()),
            ("latent_dim", s.latent_dim.to_string()),
            ("user_overlap", s.user_overlap.to_string()),
            ("taxonomy_overlap", s.taxonomy_overlap.to_string()),
            ("users_per_group", s.users_per_group.to_string()),
            ("source_behaviors", range(s.source_behaviors)),
            ("target_train_behaviors", range(s.target_train_behaviors)),
            ("target_test_behaviors", range(s.target_test_behaviors)),
            ("popularity_skew", s.popularity_skew.to_string()),
            ("affinity_sharpness", s.affinity_sharpness.to_string()),
            ("train_fraction", s.train_fraction.to_string()),
            ("min_learnable", s.min_learnable.to_string()),
            ("max_ks", s.max_ks.to_string()),
        ] {
            owned.push((format!("synth.{k}"), v));
        }
        owned
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_reproduces_settings() {
        let mut s = Settings::default();
        s.apply("tau.tag", "0.5").unwrap();
        s.apply("channel_weight.media", "2").unwrap();
        s.apply("steps_per_epoch", "7").unwrap();
        let mut back = Settings::default();
        for (k, v) in parse_pairs(&s.to_text()).unwrap() {
            back.apply(&k, &v).unwrap();
        }
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_lines() {
        assert!(Settings::default().apply("lamda1", "1").is_err());
        assert!(matches!(parse_pairs("a = 1\nnonsense\n"), Err(Error::Malformed { line: 2, .. })));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let pairs = parse_pairs("# header\n\nepochs = 3  # inline\n").unwrap();
        assert_eq!(pairs, vec![("epochs".to_string(), "3".to_string())]);
    }
}
