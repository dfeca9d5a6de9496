use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crossmatch::checkpoint::{write_atomic, write_embeddings_tsv, Checkpoint};
use crossmatch::config::{parse_pairs, Settings};
use crossmatch::eval::{run_eval, EvalMode};
use crossmatch::graph::Domain;
use crossmatch::pipeline::{build_index, kind_counts, run_ablations, Dataset, Variant};
use crossmatch::retrieval::{match_sequence, BehaviorSequence, RetrievalIndex};
use crossmatch::training::train_with;
use crossmatch::{synth, Error};

#[derive(Parser, Debug)]
#[command(name = "crossmatch", version, about = "Cross-domain graph matching for cold-start recommendation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Configuration file of `key = value` lines (keys listed below)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Random seed [default: 0, or `seed` from the config]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Evaluation mode [default: few_shot, or `strict_cold_start` from the config]
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Worker threads for index building and evaluation
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Channel weight override, e.g. `tag=0.5` (repeatable) [default: 1 for every channel]
    #[arg(long = "channel-weight", global = true, value_name = "KIND=REAL")]
    channel_weight: Vec<String>,
    /// Any configuration key, e.g. `learning_rate=0.01` (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    #[value(name = "few_shot")]
    FewShot,
    #[value(name = "strict_cold_start")]
    StrictColdStart,
}

impl From<Mode> for EvalMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::FewShot => EvalMode::FewShot,
            Mode::StrictColdStart => EvalMode::StrictColdStart,
        }
    }
}

#[derive(Subcommand, Debug, Clone)]
enum Cmd {
    /// Generate a synthetic two-domain dataset
    Synth,
    /// Load, threshold and weight both networks; write canonical TSVs and a report
    BuildGraph {
        /// Dataset directory
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Train both encoders; write a checkpoint, loss history and embeddings
    Train {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Switch off a loss: intra, inter, inter_u, inter_t, inter_n (repeatable)
        #[arg(long, value_name = "NAME")]
        ablate: Vec<String>,
    },
    /// Build the top-K index from a checkpoint
    Index {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Checkpoint directory
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
    },
    /// Match behavior sequences (one JSON object per line) against an index
    Retrieve {
        #[arg(long, value_name = "FILE")]
        index: PathBuf,
        #[arg(long, value_name = "FILE")]
        sequences: PathBuf,
    },
    /// HIT@N and item coverage of an index on the dataset's test instances
    Eval {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        index: PathBuf,
    },
    /// Train and evaluate the ablation variants from one seed
    Ablate {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Variants besides the full model: intra, inter, inter_u, inter_t,
        /// inter_n, cl, random (repeatable) [default: intra inter inter_u inter_t inter_n]
        #[arg(long, value_name = "NAME")]
        ablate: Vec<String>,
    },
    /// Re-run the command recorded in a run manifest
    Replay {
        #[arg(value_name = "MANIFEST")]
        manifest: PathBuf,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Synth => "synth",
            Cmd::BuildGraph { .. } => "build-graph",
            Cmd::Train { .. } => "train",
            Cmd::Index { .. } => "index",
            Cmd::Retrieve { .. } => "retrieve",
            Cmd::Eval { .. } => "eval",
            Cmd::Ablate { .. } => "ablate",
            Cmd::Replay { .. } => "replay",
        }
    }
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunManifest {
    subcommand: String,
    argv: Vec<String>,
    config: Vec<(String, String)>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    seed: u64,
    version: String,
    timings: Vec<(String, f64)>,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Run(Error::Config(_)) => 1,
            Failure::Run(e) if e.is_numerical() => 3,
            Failure::Run(_) => 2,
        }
    }
}

struct Run {
    argv: Vec<String>,
    common: Common,
    settings: Settings,
    mode: EvalMode,
    manifest: RunManifest,
    clock: Instant,
}

impl Run {
    fn phase(&mut self, name: &str) {
        let t = self.clock.elapsed().as_secs_f64();
        self.manifest.timings.push((name.to_string(), t));
        self.clock = Instant::now();
    }

    fn input(&mut self, key: &str, p: &Path) {
        self.manifest.inputs.insert(key.to_string(), p.display().to_string());
    }

    fn out_dir(&self) -> Result<&Path, Failure> {
        self.common.out.as_deref().ok_or_else(|| Failure::Usage("--out DIR is required".into()))
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        let dir = self.out_dir()?.to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(name);
        write_atomic(&path, bytes)?;
        self.manifest.outputs.push(path.display().to_string());
        Ok(())
    }

    fn load_data(&mut self, dir: &Path) -> Result<Dataset, Failure> {
        self.input("data", dir);
        let t = &self.settings.trainer;
        let data = Dataset::load_dir(dir, t.min_ui_count, t.edge_smoothing)?;
        for (d, r) in Domain::BOTH.iter().zip(&data.reports) {
            for w in &r.warnings {
                log::warn!("{d}: {w}");
            }
        }
        self.phase("load");
        Ok(data)
    }
}

fn key_value(s: &str) -> Result<(&str, &str), Failure> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Failure::Usage(format!("expected KEY=VALUE, got {s:?}")))
}

fn resolve_settings(common: &Common, base: Option<Settings>) -> Result<(Settings, EvalMode), Failure> {
    let usage = |e: Error| Failure::Usage(e.to_string());
    let mut s = match (base, &common.config) {
        (Some(s), _) => s,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let mut s = Settings::default();
            for (k, v) in parse_pairs(&text).map_err(usage)? {
                s.apply(&k, &v).map_err(usage)?;
            }
            s
        }
        (None, None) => Settings::default(),
    };
    for kv in &common.set {
        let (k, v) = key_value(kv)?;
        s.apply(k, v).map_err(usage)?;
    }
    for kv in &common.channel_weight {
        let (k, v) = key_value(kv)?;
        s.apply(&format!("channel_weight.{k}"), v).map_err(usage)?;
    }
    if let Some(seed) = common.seed {
        s.apply("seed", &seed.to_string()).map_err(usage)?;
    }
    if let Some(m) = common.mode {
        s.apply("strict_cold_start", &(m == Mode::StrictColdStart).to_string()).map_err(usage)?;
    }
    s.trainer.validate().map_err(usage)?;
    let mode = if s.trainer.strict_cold_start { EvalMode::StrictColdStart } else { EvalMode::FewShot };
    Ok((s, mode))
}

fn parse_variants(names: &[String]) -> Result<Vec<Variant>, Failure> {
    names
        .iter()
        .map(|n| Variant::parse(n).ok_or_else(|| Failure::Usage(format!("unknown ablation {n:?}"))))
        .collect()
}

fn print_json<T: Serialize>(v: &T) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v).map_err(Error::from)?;
    writeln!(out)?;
    Ok(())
}

fn execute(cmd: &Cmd, run: &mut Run) -> Result<(), Failure> {
    match cmd {
        Cmd::Synth => {
            run.out_dir()?;
            let data = synth::generate(&run.settings.synth)?;
            run.phase("generate");
            let dir = run.out_dir()?.to_path_buf();
            data.write_to(&dir)?;
            for f in ["nodes.tsv", "edges.source.tsv", "edges.target.tsv", "profiles.tsv", "test_instances.jsonl", "synth_report.json"] {
                run.manifest.outputs.push(dir.join(f).display().to_string());
            }
            run.phase("write");
            print_json(&data.report)
        }
        Cmd::BuildGraph { data } => {
            run.out_dir()?;
            let ds = run.load_data(data)?;
            let (nodes, edges) = ds.canonical_tsv()?;
            run.write("nodes.tsv", nodes.as_bytes())?;
            run.write("edges.tsv", edges.as_bytes())?;
            if !ds.tests.is_empty() {
                run.write("test_instances.jsonl", synth::tests_jsonl(&ds.tests)?.as_bytes())?;
            }
            let report = serde_json::json!({
                "source": { "nodes": kind_counts(&ds.source), "edges": ds.source.edges().len(), "load": ds.reports[0] },
                "target": { "nodes": kind_counts(&ds.target), "edges": ds.target.edges().len(), "load": ds.reports[1] },
                "aligned": ds.aligned.len(),
                "test_instances": ds.tests.len(),
            });
            run.write("graph_report.json", serde_json::to_string_pretty(&report).map_err(Error::from)?.as_bytes())?;
            run.phase("write");
            print_json(&report)
        }
        Cmd::Train { data, ablate } => {
            run.out_dir()?;
            let variants = parse_variants(ablate)?;
            let ds = run.load_data(data)?;
            let mut cfg = run.settings.trainer.clone();
            for v in &variants {
                cfg = v.configure(&cfg);
            }
            let mut history = String::new();
            let outcome = if variants.contains(&Variant::FrozenRandom) {
                let mut m = crossmatch::model::Model::init(&ds.source, &ds.target, cfg.model, cfg.seed);
                m.round_to_f32();
                m
            } else {
                train_with(&ds.source, &ds.target, &ds.aligned, &cfg, |r| {
                    history.push_str(&serde_json::to_string(r).expect("step record serializes"));
                    history.push('\n');
                })?
                .model
            };
            run.phase("train");
            let ckpt = Checkpoint::new(outcome, &ds.source, &ds.target);
            let dir = run.out_dir()?.to_path_buf();
            ckpt.save(&dir)?;
            run.manifest.outputs.push(dir.join("model.bin").display().to_string());
            run.write("history.jsonl", history.as_bytes())?;
            for (d, net) in [(Domain::Source, &ds.source), (Domain::Target, &ds.target)] {
                let emb = ckpt.model.embed_all(net, cfg.seed);
                let mut buf = Vec::new();
                write_embeddings_tsv(&mut buf, net, &emb)?;
                run.write(&format!("embeddings.{d}.tsv"), &buf)?;
            }
            run.phase("write");
            let last = history.lines().last().and_then(|l| serde_json::from_str::<serde_json::Value>(l).ok());
            print_json(&serde_json::json!({ "steps": history.lines().count(), "last": last }))
        }
        Cmd::Index { data, model } => {
            run.out_dir()?;
            let ds = run.load_data(data)?;
            run.input("model", model);
            let ckpt = Checkpoint::load(model)?;
            ckpt.check_network(&ds.source)?;
            ckpt.check_network(&ds.target)?;
            let seed = run.settings.trainer.seed;
            let (index, warnings) =
                build_index(&ckpt.model, &ds.source, &ds.target, run.settings.retrieval.k, seed, run.common.threads)?;
            for w in &warnings {
                log::warn!("{w}");
            }
            run.phase("index");
            let mut buf = Vec::new();
            index.write(&mut buf)?;
            run.write("index.tsv", &buf)?;
            print_json(&serde_json::json!({
                "k": index.k(),
                "anchors": index.anchor_count(),
                "items": index.items().len(),
                "warnings": warnings,
            }))
        }
        Cmd::Retrieve { index, sequences } => {
            run.input("index", index);
            run.input("sequences", sequences);
            let idx = RetrievalIndex::read(BufReader::new(std::fs::File::open(index)?))?;
            let reader = BufReader::new(std::fs::File::open(sequences)?);
            let mut out = String::new();
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let seq: BehaviorSequence = serde_json::from_str(&line)
                    .map_err(|e| Error::malformed(i + 1, format!("bad behavior sequence: {e}")))?;
                let result = match_sequence(&seq.normalized()?, &idx, &run.settings.retrieval.matching);
                for m in &result.missing {
                    log::warn!("line {}: no index list for {m}", i + 1);
                }
                out.push_str(&serde_json::to_string(&result).map_err(Error::from)?);
                out.push('\n');
            }
            run.phase("retrieve");
            if run.common.out.is_some() {
                run.write("matches.jsonl", out.as_bytes())?;
            } else {
                std::io::stdout().lock().write_all(out.as_bytes())?;
            }
            Ok(())
        }
        Cmd::Eval { data, index } => {
            let ds = run.load_data(data)?;
            run.input("index", index);
            let idx = RetrievalIndex::read(BufReader::new(std::fs::File::open(index)?))?;
            let report = run_eval(&idx, &ds.target, &ds.tests, run.mode, &run.settings.retrieval.matching, run.common.threads)?;
            run.phase("eval");
            eprint!("{}", report.to_text());
            if run.common.out.is_some() {
                run.write("eval_report.json", serde_json::to_string_pretty(&report).map_err(Error::from)?.as_bytes())?;
            }
            print_json(&report)
        }
        Cmd::Ablate { data, ablate } => {
            let mut variants = vec![Variant::Full];
            if ablate.is_empty() {
                variants = Variant::TABLE.to_vec();
            } else {
                variants.extend(parse_variants(ablate)?);
            }
            let ds = match data.join("test_instances.jsonl").exists() {
                true => run.load_data(data)?,
                false => return Err(Failure::Run(Error::EmptyTestSet)),
            };
            let report = run_ablations(
                &ds,
                &run.settings.trainer,
                &run.settings.retrieval,
                run.mode,
                &variants,
                run.common.threads,
            )?;
            run.phase("ablate");
            eprint!("{}", report.to_text());
            if run.common.out.is_some() {
                run.write("ablation.csv", report.to_csv().as_bytes())?;
                run.write("ablation.json", serde_json::to_string_pretty(&report).map_err(Error::from)?.as_bytes())?;
            }
            print_json(&report)
        }
        Cmd::Replay { .. } => unreachable!("replay is resolved before execution"),
    }
}

fn config_help() -> String {
    let mut s = String::from("Configuration keys (file or --set) and their defaults:\n");
    for (k, v) in Settings::default().to_pairs() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s.push_str("\nExit codes: 0 success, 1 usage error, 2 data or validation error, 3 numerical divergence.\n");
    s
}

fn command() -> clap::Command {
    let help = config_help();
    Cli::command().after_long_help(help.clone()).mut_subcommands(|c| c.after_long_help(help.clone()))
}

fn parse(argv: &[String]) -> Result<Cli, clap::Error> {
    let matches = command().try_get_matches_from(argv)?;
    Cli::from_arg_matches(&matches)
}

fn run_cli(argv: Vec<String>) -> Result<(), Failure> {
    let cli = match parse(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return Ok(());
            }
            return Err(Failure::Usage(e.render().to_string()));
        }
    };
    // A replayed run takes its argv and resolved configuration from the manifest.
    let (cli, argv, base) = if let Cmd::Replay { manifest } = &cli.cmd {
        let text = std::fs::read_to_string(manifest)
            .map_err(|e| Failure::Usage(format!("cannot read manifest {}: {e}", manifest.display())))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("bad manifest: {e}")))?;
        let mut s = Settings::default();
        for (k, v) in &m.config {
            s.apply(k, v).map_err(|e| Failure::Usage(e.to_string()))?;
        }
        let inner = parse(&m.argv).map_err(|e| Failure::Usage(e.render().to_string()))?;
        if matches!(inner.cmd, Cmd::Replay { .. }) {
            return Err(Failure::Usage("a manifest cannot replay another replay".into()));
        }
        let mut inner = inner;
        if cli.common.out.is_some() {
            inner.common.out = cli.common.out.clone();
        }
        (inner, m.argv, Some(s))
    } else {
        (cli, argv, None)
    };
    let (settings, mode) = resolve_settings(&cli.common, base)?;
    let manifest = RunManifest {
        subcommand: cli.cmd.name().to_string(),
        argv: argv.clone(),
        config: settings.to_pairs(),
        inputs: BTreeMap::new(),
        outputs: Vec::new(),
        seed: settings.trainer.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        timings: Vec::new(),
    };
    let mut run = Run { argv, common: cli.common.clone(), settings, mode, manifest, clock: Instant::now() };
    log::info!("{} (seed {}, mode {})", run.manifest.subcommand, run.manifest.seed, mode.as_str());
    execute(&cli.cmd, &mut run)?;
    if run.common.out.is_some() {
        run.manifest.argv = run.argv.clone();
        let bytes = serde_json::to_vec_pretty(&run.manifest).map_err(Error::from)?;
        let dir = run.out_dir()?.to_path_buf();
        std::fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("run_manifest.json"), &bytes)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    match run_cli(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("{}", m.trim_end()),
                Failure::Run(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.code())
        }
    }
}
