mod common;

use std::collections::HashMap;

use crossmatch::graph::{load_network, Domain, EdgeKind, Network, NodeKind};
use crossmatch::Error;
use proptest::prelude::*;

const NODES: &str = "user\tu1\tsource\nitem\ti1\tsource\nitem\ti2\tsource\ntag\tt1\tsource\nitem\tx\ttarget\n";

#[test]
fn weighted_sampling_frequency() {
    let nodes = vec![(NodeKind::Tag, "t".to_string()), (NodeKind::Item, "a".into()), (NodeKind::Item, "b".into())];
    let edges = vec![
        ((NodeKind::Tag, "t".to_string()), (NodeKind::Item, "a".to_string()), 9.0),
        ((NodeKind::Tag, "t".to_string()), (NodeKind::Item, "b".to_string()), 1.0),
    ];
    let net = Network::from_parts(Domain::Source, nodes, edges).unwrap();
    let t = net.id_of(NodeKind::Tag, "t").unwrap();
    let a = net.id_of(NodeKind::Item, "a").unwrap();
    let draws = net.sample_neighbors(t, 10_000, &mut common::rng(5));
    let freq = draws.iter().filter(|&&n| n == a).count() as f64 / 1e4;
    assert!((freq - 0.9).abs() < 0.02, "frequency {freq}");
}

#[test]
fn pmi_weights_match_oracle() {
    use NodeKind::*;
    let counts = [("u1", "i1", 4.0), ("u1", "i2", 1.0), ("u2", "i1", 1.0), ("u2", "i2", 6.0), ("u2", "i3", 2.0)];
    let mut nodes: Vec<(NodeKind, String)> = ["u1", "u2"].iter().map(|u| (User, u.to_string())).collect();
    nodes.extend(["i1", "i2", "i3"].iter().map(|i| (Item, i.to_string())));
    let edges: Vec<_> = counts.iter().map(|(u, i, c)| ((User, u.to_string()), (Item, i.to_string()), *c)).collect();
    let mut net = Network::from_parts(Domain::Source, nodes, edges).unwrap();
    let smoothing = 0.05;
    net.compute_edge_weights(smoothing).unwrap();

    let total: f64 = counts.iter().map(|c| c.2).sum();
    let mut marg: HashMap<&str, f64> = HashMap::new();
    for (u, i, c) in counts {
        *marg.entry(u).or_default() += c;
        *marg.entry(i).or_default() += c;
    }
    let raw: Vec<f64> = counts.iter().map(|(u, i, c)| (c * total / (marg[u] * marg[i])).ln().max(smoothing)).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    for ((u, i, _), w) in counts.iter().zip(&raw) {
        let a = net.id_of(User, u).unwrap();
        let b = net.id_of(Item, i).unwrap();
        let got = net.weight(a, b).unwrap();
        assert!((got - w / mean).abs() < 1e-12, "{u}-{i}: {got} vs {}", w / mean);
    }
}

#[test]
fn duplicate_records_merge_and_weak_behavior_drops() {
    let edges = "user\tu1\titem\ti1\t2\tsource\nuser\tu1\titem\ti1\t2\tsource\nuser\tu1\titem\ti2\t1\tsource\ntag\tt1\titem\ti1\t1\tsource\n";
    let (net, report) = load_network(NODES.as_bytes(), edges.as_bytes(), Domain::Source, 3.0).unwrap();
    assert_eq!(report.dropped_ui, 1);
    assert!(report.merged_duplicates >= 1);
    let u = net.id_of(NodeKind::User, "u1").unwrap();
    let i1 = net.id_of(NodeKind::Item, "i1").unwrap();
    assert_eq!(net.weight(u, i1), Some(4.0));
    assert!(net.has_edges(EdgeKind::TI));
}

#[test]
fn loader_rejects_bad_records() {
    let cases = [
        ("tag\tt1\tuser\tu1\t1\tsource\n", "illegal"),
        ("user\tu1\titem\ti1\t0\tsource\n", "count"),
        ("user\tu1\titem\tnope\t3\tsource\n", "undeclared"),
        ("user\tu1\titem\n", "fields"),
    ];
    for (edges, what) in cases {
        let err = load_network(NODES.as_bytes(), edges.as_bytes(), Domain::Source, 1.0).unwrap_err();
        let ok = match what {
            "illegal" => matches!(err, Error::IllegalKindPair { line: 1, .. }),
            "count" => matches!(err, Error::NonPositiveCount { line: 1, .. }),
            "undeclared" => matches!(err, Error::UndeclaredNode { line: 1, .. }),
            _ => matches!(err, Error::Malformed { line: 1, .. }),
        };
        assert!(ok, "{what}: {err}");
    }
}

fn canonical(net: &Network) -> (String, String) {
    let (mut n, mut e) = (Vec::new(), Vec::new());
    net.write_nodes_tsv(&mut n).unwrap();
    net.write_edges_tsv(&mut e).unwrap();
    (String::from_utf8(n).unwrap(), String::from_utf8(e).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn tsv_round_trip_is_a_fixed_point(seed in 0u64..10_000, size in 10usize..30) {
        let net = common::toy_network(Domain::Target, size, seed);
        let (nodes, edges) = canonical(&net);
        let (back, _) = load_network(nodes.as_bytes(), edges.as_bytes(), Domain::Target, 0.0).unwrap();
        prop_assert_eq!(canonical(&back), (nodes, edges));
    }

    #[test]
    fn weights_are_positive_and_adjacency_symmetric(seed in 0u64..10_000, size in 10usize..30) {
        let net = common::toy_network(Domain::Source, size, seed);
        net.validate().unwrap();
        for e in net.edges() {
            prop_assert!(e.weight > 0.0);
            prop_assert_eq!(net.weight(e.a, e.b), net.weight(e.b, e.a));
        }
    }

    #[test]
    fn samples_are_neighbors(seed in 0u64..10_000, fanout in 1usize..8) {
        let net = common::toy_network(Domain::Source, 20, seed);
        let mut r = common::rng(seed);
        for n in net.node_ids() {
            let s = net.sample_neighbors(n, fanout, &mut r);
            prop_assert_eq!(s.len(), fanout);
            for m in s {
                prop_assert!(net.is_neighbor(n, m) || (net.degree(n) == 0 && m == n));
            }
        }
    }
}
