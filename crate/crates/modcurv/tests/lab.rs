use modcurv::curvature::Conventions;
use modcurv::error::Error;
use modcurv::lab::*;
use modcurv::nctorus::{AlgebraParams, TorusElement};
use modcurv::psymbol::QuadratureConfig;
use num_complex::Complex64 as C64;

fn small_dilaton() -> TorusElement {
    TorusElement::hermitian_from(AlgebraParams::standard(), [((1, 0), C64::new(0.1, 0.0)), ((0, 1), C64::new(0.05, 0.02))])
}

fn symbol_vs_closed(conv: &Conventions) -> f64 {
    let h = small_dilaton();
    let p = AlgebraParams::standard();
    let probes = [TorusElement::hermitian_from(p, [((1, 0), C64::new(1.0, 0.0))])];
    let s = symbol_a2(&h, &probes, 6, &QuadratureConfig::default(), conv).unwrap();
    let c = closed_form_a2(&h, &probes, 6, conv).unwrap();
    (s[0] - c[0]).abs() / c[0].abs()
}

#[test]
fn tampered_measure_is_detected() {
    let tol = Tolerances::default().a2_symbol;
    assert!(symbol_vs_closed(&Conventions::default()) < tol);
    let bad = Conventions { measure_factor: 2.0, ..Conventions::default() };
    assert!(symbol_vs_closed(&bad) > 0.5);
}

#[test]
fn config_errors_map_to_exit_two() {
    let e = ExperimentConfig::from_json_str(r#"{"seed": 1, "no_such_field": 3}"#).unwrap_err();
    assert!(matches!(e, Error::Config(_)));
    assert_eq!(exit_code(&e), EXIT_CONFIG);
    let e = ExperimentConfig::from_json_str(r#"{"tolerances": {"gauss_bonnet": 0.0}}"#).unwrap_err();
    assert_eq!(exit_code(&e), EXIT_CONFIG);
    let ok = ExperimentConfig::from_json_str(r#"{"seed": 7}"#).unwrap();
    assert_eq!(ok.seed, 7);
}

#[test]
fn ambiguous_snap_is_a_calibration_error() {
    assert_eq!(snap("x", 0.999, &[1.0, 2.0], 1e-2).unwrap(), 1.0);
    let e = snap("x", 1.5, &[1.0, 2.0], 1.0).unwrap_err();
    assert_eq!(exit_code(&e), EXIT_CALIBRATION);
    assert_eq!(exit_code(&snap("x", 9.0, &[1.0, 2.0], 1e-2).unwrap_err()), EXIT_CALIBRATION);
}

#[test]
fn reports_round_trip_through_files() {
    let cfg = ExperimentConfig::default();
    let r = run_suite(SuiteName::Identities, &cfg).unwrap();
    assert!(r.passed());
    let dir = std::env::temp_dir().join(format!("modcurv-lab-{}", std::process::id()));
    let files = emit_report(&r, &dir, "identities").unwrap();
    let json = std::fs::read_to_string(&files[0]).unwrap();
    let back = validate_report_json(&json).unwrap();
    assert_eq!(back.checks, r.checks);
    for (t, f) in r.tables.iter().zip(&files[1..]) {
        let n = std::fs::read_to_string(f).unwrap().lines().count();
        assert_eq!(n, t.rows.len() + 1);
    }
    let mut bad: serde_json::Value = serde_json::from_str(&json).unwrap();
    bad["schema_version"] = 99.into();
    assert!(validate_report_json(&bad.to_string()).is_err());
    std::fs::remove_dir_all(dir).ok();
}
