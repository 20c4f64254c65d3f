use modcurv_wasm::{curvature_heatmap, heisenberg_view, kernel_curve, kernel_curve_js};

const THETA: f64 = 0.6180339887498949;
const TAU: [f64; 2] = [0.3, 1.1];

#[test]
fn kernel_curve_samples_endpoints() {
    let v = kernel_curve("Ktilde0", -1.0, 1.0, 3, 0.0).unwrap();
    let vals = v["values"].as_array().unwrap();
    assert_eq!(vals.len(), 3);
    assert!((vals[1].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!(kernel_curve("nope", 0.0, 1.0, 10, 0.0).is_err());
    assert!(kernel_curve("K0", 1.0, 0.0, 10, 0.0).is_err());
    let e: serde_json::Value = serde_json::from_str(&kernel_curve_js("nope", 0.0, 1.0, 10, 0.0)).unwrap();
    assert!(e["error"].is_string());
}

#[test]
fn heatmap_integrates_to_gauss_bonnet() {
    let res = 16;
    let v = curvature_heatmap(THETA, TAU, 1.0, [0.12, 0.08, 0.05], 8, res).unwrap();
    let vals: Vec<f64> = v["values"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(vals.len(), res * res);
    // grid mean of a trigonometric polynomial of low degree is its constant term
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    assert!(mean.abs() < 1e-9, "{mean}");
    assert!(vals.iter().any(|x| x.abs() > 1e-4));
    let flat = curvature_heatmap(THETA, TAU, 0.0, [0.12, 0.08, 0.05], 4, 8).unwrap();
    assert!(flat["values"].as_array().unwrap().iter().all(|x| x.as_f64().unwrap().abs() < 1e-14));
    assert!(curvature_heatmap(THETA, TAU, 1.0, [0.1, 0.0, 0.0], 40, 8).is_err());
}

#[test]
fn heisenberg_view_shows_the_ladder() {
    let v = heisenberg_view(THETA, TAU, 1, 256, 0.0, 6).unwrap();
    let om = v["ladder_spacing"].as_f64().unwrap();
    for (k, e) in v["eigenvalues"].as_array().unwrap().iter().enumerate() {
        assert!((e.as_f64().unwrap() - om * k as f64).abs() < 1e-6 * om, "{k} {e} {om}");
    }
    assert!((v["a2"].as_f64().unwrap() - 0.5).abs() < 1e-2);
    assert!(heisenberg_view(THETA, TAU, 0, 128, 0.0, 6).is_err());
    assert!(heisenberg_view(THETA, TAU, 1, 4096, 0.0, 6).is_err());
    let pert = heisenberg_view(THETA, TAU, 2, 64, 1.0, 4).unwrap();
    assert_eq!(pert["eigenvalues"].as_array().unwrap().len(), 4);
}
