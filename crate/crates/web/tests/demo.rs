use crossmatch_web::Demo;
use serde_json::Value;

#[test]
fn summary_reports_both_domains() {
    let demo = Demo::create(1).unwrap();
    let s: Value = serde_json::from_str(&demo.summary()).unwrap();
    assert!(s["source"]["item"].as_u64().unwrap() > 0);
    assert!(s["target"]["item"].as_u64().unwrap() > 0);
    assert!(s["tests"].as_u64().unwrap() > 0);
}

#[test]
fn training_reports_one_loss_per_step() {
    let mut demo = Demo::create(2).unwrap();
    let t: Value = serde_json::from_str(&demo.run_training(5).unwrap()).unwrap();
    assert_eq!(t["loss"].as_array().unwrap().len(), 5);
    let cov = t["coverage"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&cov));
}

#[test]
fn breakdown_sums_to_score_and_zero_weight_silences_a_channel() {
    let demo = Demo::create(3).unwrap();
    let v: Value = serde_json::from_str(&demo.match_instance(0, &[1.0, 1.0, 0.0, 1.0, 1.0, 1.0], 20).unwrap()).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert!(!rows.is_empty() && rows.len() <= 20);
    for r in rows {
        let parts: Vec<f64> = r["breakdown"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(parts[2], 0.0);
        let sum: f64 = parts.iter().sum();
        assert!((sum - r["score"].as_f64().unwrap()).abs() < 1e-9);
    }
}

#[test]
fn same_seed_same_output() {
    let a = Demo::create(4).unwrap().match_instance(1, &[1.0; 6], 10).unwrap();
    let b = Demo::create(4).unwrap().match_instance(1, &[1.0; 6], 10).unwrap();
    assert_eq!(a, b);
}
