mod common;

use crossmatch::checkpoint::Checkpoint;
use crossmatch::config::RetrievalConfig;
use crossmatch::eval::{run_eval, EvalMode};
use crossmatch::graph::{Domain, EdgeKind};
use crossmatch::pipeline::{build_index, run_ablations, Dataset, Variant};
use crossmatch::synth::{generate, strict_cold_start_transform};
use crossmatch::training::train;
use crossmatch::Error;

fn dataset(seed: u64) -> Dataset {
    Dataset::from_synth(&generate(&common::small_synth(seed)).unwrap(), 3.0, 0.1).unwrap()
}

fn index_bytes(index: &crossmatch::retrieval::RetrievalIndex) -> Vec<u8> {
    let mut buf = Vec::new();
    index.write(&mut buf).unwrap();
    buf
}

/// Synthesize, train, checkpoint, index and evaluate; every artifact as bytes.
fn run_all(seed: u64) -> Vec<Vec<u8>> {
    let synth = generate(&common::small_synth(seed)).unwrap();
    let data = Dataset::from_synth(&synth, 3.0, 0.1).unwrap();
    let cfg = common::small_trainer(seed, 20);
    let out = train(&data.source, &data.target, &data.aligned, &cfg).unwrap();
    let mut ck = Vec::new();
    Checkpoint::new(out.model.clone(), &data.source, &data.target).write(&mut ck).unwrap();
    let (index, _) = build_index(&out.model, &data.source, &data.target, 100, seed, 1).unwrap();
    let report = run_eval(&index, &data.target, &data.tests, EvalMode::FewShot, &Default::default(), 1).unwrap();
    let (nodes, edges) = data.canonical_tsv().unwrap();
    vec![
        synth.nodes_tsv().into_bytes(),
        synth.edges_tsv(Domain::Source).into_bytes(),
        synth.tests_jsonl().unwrap().into_bytes(),
        nodes.into_bytes(),
        edges.into_bytes(),
        serde_json::to_vec(&out.history).unwrap(),
        ck,
        index_bytes(&index),
        serde_json::to_vec(&report).unwrap(),
    ]
}

#[test]
fn every_stage_is_byte_identical_across_runs() {
    let a = run_all(5);
    let b = run_all(5);
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        assert!(x == y, "stage {i} differs");
    }
    assert_ne!(run_all(6)[6], a[6]);
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let data = dataset(2);
    let out = train(&data.source, &data.target, &data.aligned, &common::small_trainer(2, 15)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    Checkpoint::new(out.model.clone(), &data.source, &data.target).save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    back.check_network(&data.source).unwrap();
    back.check_network(&data.target).unwrap();
    assert_eq!(back.model, out.model);
    let eval = |m| {
        let (index, _) = build_index(m, &data.source, &data.target, 100, 0, 1).unwrap();
        let r = run_eval(&index, &data.target, &data.tests, EvalMode::FewShot, &Default::default(), 1).unwrap();
        (index_bytes(&index), serde_json::to_string(&r).unwrap())
    };
    assert_eq!(eval(&out.model), eval(&back.model));
    // A different network must be refused.
    assert!(back.check_network(&dataset(3).source).is_err());
}

#[test]
fn written_dataset_reloads_to_the_same_graph() {
    let synth = generate(&common::small_synth(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    synth.write_to(dir.path()).unwrap();
    let a = Dataset::from_synth(&synth, 3.0, 0.1).unwrap();
    let b = Dataset::load_dir(dir.path(), 3.0, 0.1).unwrap();
    assert_eq!(a.canonical_tsv().unwrap(), b.canonical_tsv().unwrap());
    assert_eq!(a.tests, b.tests);
}

#[test]
fn strict_mode_refuses_leaked_data() {
    let data = dataset(1);
    let model = crossmatch::model::Model::init(&data.source, &data.target, common::small_trainer(1, 1).model, 1);
    let (index, _) = build_index(&model, &data.source, &data.target, 100, 1, 1).unwrap();
    let err = run_eval(&index, &data.target, &data.tests, EvalMode::StrictColdStart, &Default::default(), 1).unwrap_err();
    assert!(matches!(err, Error::Leakage(_)));

    let strict = strict_cold_start_transform(&generate(&common::small_synth(1)).unwrap());
    let data = Dataset::from_synth(&strict, 3.0, 0.1).unwrap();
    assert!(!data.target.has_edges(EdgeKind::UI) && !data.target.has_edges(EdgeKind::II));
    let (index, _) = build_index(&model, &data.source, &data.target, 100, 1, 1).unwrap();
    run_eval(&index, &data.target, &data.tests, EvalMode::StrictColdStart, &Default::default(), 1).unwrap();
}

#[test]
fn strict_ablation_marks_user_task_not_applicable() {
    let strict = strict_cold_start_transform(&generate(&common::small_synth(8)).unwrap());
    let data = Dataset::from_synth(&strict, 3.0, 0.1).unwrap();
    let cfg = common::small_trainer(8, 3);
    let report =
        run_ablations(&data, &cfg, &RetrievalConfig::default(), EvalMode::StrictColdStart, &Variant::TABLE, 1).unwrap();
    assert_eq!(report.rows.len(), 6);
    for r in &report.rows {
        assert_eq!(r.metrics.is_none(), r.name == Variant::NoInterUser.name(), "{}", r.name);
    }
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.contains("w/o L_inter_u,strict_cold_start,N/A"));
    assert!(report.to_text().contains("N/A"));
}

#[test]
fn training_lowers_the_objective() {
    let data = dataset(9);
    let mut cfg = common::small_trainer(9, 200);
    cfg.loss.batch_size = 64;
    let out = train(&data.source, &data.target, &data.aligned, &cfg).unwrap();
    let mean = |r: &[crossmatch::training::StepRecord]| r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64;
    let (head, tail) = (mean(&out.history[..10]), mean(&out.history[190..]));
    assert!(tail < head, "{head} -> {tail}");
}
