use ivpretest_demo::{analyze_json, pretest_json, simulate_csv};

#[test]
fn simulated_csv_round_trips_through_the_pretest() {
    let csv = simulate_csv(150, 3, 0.4, 0.5, 1).unwrap();
    assert!(csv.starts_with("y,d,z1,z2,z3\n"));
    assert_eq!(csv.lines().count(), 151);
    let v: serde_json::Value = serde_json::from_str(&pretest_json(&csv, 10.0, 2).unwrap()).unwrap();
    assert_eq!(v["omega"].as_array().unwrap().len(), 3);
    assert!(v["f_stat"].as_f64().unwrap() > 10.0);
}

#[test]
fn analysis_accepts_partial_json_config() {
    let csv = simulate_csv(200, 2, 0.5, 0.3, 3).unwrap();
    let cfg = r#"{"beta0": 1.0, "sampler": {"n_samples": 1000, "burn_in": 200}}"#;
    let v: serde_json::Value = serde_json::from_str(&analyze_json(&csv, cfg).unwrap()).unwrap();
    assert_eq!(v["branch"], "tsls_conditional");
    assert_eq!(v["config"]["beta0"], 1.0);
}

#[test]
fn errors_are_messages() {
    assert!(pretest_json("y,d\n1,2\n", 10.0, 0).unwrap_err().contains("instrument"));
    assert!(analyze_json("y,d,z\n1,2,3\n", "{\"c00\": 1}").unwrap_err().starts_with("config"));
}
