//! Browser bindings for three interactive views: kernel curves, the
//! curvature density on a sample grid, and oscillator spectra with their
//! heat traces. Each binding returns a JSON string; the plain Rust functions
//! underneath are usable (and tested) natively.

use modcurv::curvature::modular_curvature;
use modcurv::error::{Error, Result};
use modcurv::gns::{fit_trace_curve, GnsTruncation};
use modcurv::heisenberg::{
    flat_heat_trace, ladder_spacing, oscillator_laplacian, HeisenbergGrid, HeisenbergParams, ModuleFitConfig,
    ModuleHeat, ModuleOperators,
};
use modcurv::modfunc::kernels::{CurvatureKernel, KernelKind};
use modcurv::nctorus::{AlgebraParams, TorusElement};
use num_complex::Complex64 as C64;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Largest curvature truncation accepted from the page.
pub const MAX_TRUNC: usize = 12;
/// Largest module grid accepted from the page.
pub const MAX_POINTS: usize = 256;

/// Samples of a kernel on `n` points of `[a, b]`; bivariate kernels are cut
/// along `t = offset`.
pub fn kernel_curve(which: &str, a: f64, b: f64, n: usize, offset: f64) -> Result<Value> {
    let kind = KernelKind::parse(which).ok_or_else(|| Error::Config(format!("unknown kernel {which:?}")))?;
    if !(b > a) || !(2..=4096).contains(&n) {
        return Err(Error::Config("need a < b and 2 ≤ n ≤ 4096".into()));
    }
    let k = CurvatureKernel::new(kind);
    let s: Vec<f64> = (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect();
    let v: Vec<f64> = s.iter().map(|&x| if kind.is_bivariate() { k.eval2(x, offset) } else { k.eval(x) }).collect();
    Ok(json!({"kernel": which, "s": s, "values": v}))
}

/// Dilaton `h = s·(h₀ + h₀*)` with `h₀ = a U₁ + b U₂ + c U₁U₂`.
pub fn sample_dilaton(params: AlgebraParams, scale: f64, coeffs: [f64; 3]) -> TorusElement {
    TorusElement::hermitian_from(
        params,
        [((1, 0), C64::new(coeffs[0], 0.0)), ((0, 1), C64::new(coeffs[1], 0.0)), ((1, 1), C64::new(coeffs[2], 0.0))],
    )
    .scale_re(scale)
}

/// Curvature density `K_k` read as the Fourier series
/// `Σ c_mn e^{2πi(mx+ny)}` on a `res × res` grid of the unit square, with
/// the Gauss–Bonnet residual.
pub fn curvature_heatmap(theta: f64, tau: [f64; 2], scale: f64, coeffs: [f64; 3], trunc: usize, res: usize) -> Result<Value> {
    if !(2..=MAX_TRUNC).contains(&trunc) || !(4..=256).contains(&res) {
        return Err(Error::Config(format!("need 2 ≤ trunc ≤ {MAX_TRUNC} and 4 ≤ res ≤ 256")));
    }
    let p = AlgebraParams::new(theta, C64::new(tau[0], tau[1]))?;
    let h = sample_dilaton(p, scale, coeffs);
    let r = modular_curvature(&h, GnsTruncation::new(trunc)?)?;
    let terms: Vec<(i64, i64, C64)> = r.density.iter().map(|(ix, c)| (ix.m, ix.n, c)).collect();
    let mut values = Vec::with_capacity(res * res);
    for j in 0..res {
        let y = j as f64 / res as f64;
        for i in 0..res {
            let x = i as f64 / res as f64;
            let v: C64 = terms.iter().map(|&(m, n, c)| c * C64::from_polar(1.0, 2.0 * std::f64::consts::PI * (m as f64 * x + n as f64 * y))).sum();
            values.push(v.re);
        }
    }
    Ok(json!({"res": res, "values": values, "gauss_bonnet_residual": r.gauss_bonnet_residual, "terms": terms.len()}))
}

/// Lowest eigenvalues of the module Laplacian on `ℰ(g⁻¹)` for
/// `g = (1, 0; c, 1)`, optionally conformally perturbed, and the heat trace
/// against the flat closed form.
pub fn heisenberg_view(theta: f64, tau: [f64; 2], c: i64, points: usize, dilaton_scale: f64, count: usize) -> Result<Value> {
    if !(32..=MAX_POINTS).contains(&points) || c == 0 || c.abs() > 2 {
        return Err(Error::Config(format!("need 32 ≤ points ≤ {MAX_POINTS} and c ∈ {{±1, ±2}}")));
    }
    let p = AlgebraParams::new(theta, C64::new(tau[0], tau[1]))?;
    let hp = HeisenbergParams::new([1, 0, c, 1], theta, p.tau)?;
    let module = hp.inverse()?;
    let ops = ModuleOperators::new(module, HeisenbergGrid::new(12.0, points)?)?;
    let h = (dilaton_scale != 0.0).then(|| sample_dilaton(p, dilaton_scale, [0.12, 0.08, 0.05]));
    let heat = ModuleHeat::new(&oscillator_laplacian(&ops, h.as_ref())?)?;
    let w = vec![1.0; heat.spectral.dim()];
    let ts: Vec<f64> = (0..40).map(|i| 0.02 * (1.0f64 + 0.1 * i as f64).powi(2)).collect();
    let trace: Vec<f64> = ts.iter().map(|&t| heat.trace(&w, t)).collect();
    let flat: Vec<f64> = ts.iter().map(|&t| flat_heat_trace(&module, t)).collect();
    let fit = fit_trace_curve(|t| heat.trace(&w, t), &ModuleFitConfig::default().flat)?;
    Ok(json!({
        "eigenvalues": heat.spectral.values.iter().take(count).collect::<Vec<_>>(),
        "ladder_spacing": ladder_spacing(&module),
        "components": module.components(),
        "t": ts,
        "trace": trace,
        "flat_trace": flat,
        "a0": fit.a0,
        "a2": fit.a2,
    }))
}

fn to_js(r: Result<Value>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({"error": e.to_string()}).to_string(),
    }
}

#[wasm_bindgen(js_name = kernelCurve)]
pub fn kernel_curve_js(which: &str, a: f64, b: f64, n: usize, offset: f64) -> String {
    to_js(kernel_curve(which, a, b, n, offset))
}

#[wasm_bindgen(js_name = curvatureHeatmap)]
pub fn curvature_heatmap_js(theta: f64, tau_re: f64, tau_im: f64, scale: f64, a: f64, b: f64, c: f64, trunc: usize, res: usize) -> String {
    to_js(curvature_heatmap(theta, [tau_re, tau_im], scale, [a, b, c], trunc, res))
}

#[wasm_bindgen(js_name = heisenbergView)]
pub fn heisenberg_view_js(theta: f64, tau_re: f64, tau_im: f64, c: i32, points: usize, dilaton_scale: f64, count: usize) -> String {
    to_js(heisenberg_view(theta, [tau_re, tau_im], c as i64, points, dilaton_scale, count))
}
