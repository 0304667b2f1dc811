use canvi_wasm::{counterexample_json, dispersion_coverage_json, length_curve_json};
use serde_json::Value;

#[test]
fn length_curve_has_the_closed_form_minimum() {
    let v: Value = serde_json::from_str(&length_curve_json(0.3, 0.05, 0.0, 0.6, 0.1, 2000, 1).unwrap()).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 7);
    let at_rho = &rows[3];
    assert!((at_rho["analytic"].as_f64().unwrap() - 3.7393).abs() < 1e-3);
    assert!(rows.iter().all(|r| r["mc_mean"].as_f64().unwrap().is_finite()));
    assert!(length_curve_json(0.3, 0.05, -1.0, 1.0, 1e-6, 10_000, 1).is_err());
}

#[test]
fn dispersion_breaks_hdr_but_not_conformal() {
    let v: Value = serde_json::from_str(&dispersion_coverage_json(0.5, 5000, 5000, 2).unwrap()).unwrap();
    let last = |k: &str| v[k]["coverage_mean"].as_array().unwrap().last().unwrap().clone();
    let conformal = last("conformal").as_f64().unwrap();
    let hdr = last("hdr").as_f64().unwrap();
    assert!((conformal - 0.95).abs() < 0.02, "{conformal}");
    assert!(hdr < 0.8, "{hdr}");
    assert!(dispersion_coverage_json(-1.0, 100, 100, 0).is_err());
}

#[test]
fn counterexample_reports_exact_lengths() {
    let v: Value = serde_json::from_str(&counterexample_json(50.0, 0.1, 20_000, 3).unwrap()).unwrap();
    assert_eq!(v["exact"]["true_posterior"].as_f64(), Some(50.0));
    assert_eq!(v["exact"]["truncated"].as_f64(), Some(25.0));
    assert!(counterexample_json(50.0, 0.3, 100, 0).is_err());
}
