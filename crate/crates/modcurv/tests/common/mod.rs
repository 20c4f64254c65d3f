use std::f64::consts::PI;

use faer::{Mat, Side};
use modcurv::heisenberg::{HeisenbergGrid, HeisenbergParams};
use num_complex::Complex64 as C64;

/// Periodic spectral differentiation on `G` equispaced points of a period
/// `2L`, entry by entry: `(π/L)·½(−1)^{i−j} cot(π(i−j)/G)` off the diagonal.
pub fn cot_derivative(g: usize, half_width: f64) -> Mat<f64> {
    Mat::from_fn(g, g, |i, j| {
        if i == j {
            return 0.0;
        }
        let k = i as f64 - j as f64;
        let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
        PI / half_width * 0.5 * sign / (PI * k / g as f64).tan()
    })
}

/// Spectrum of `rk²·A*A` (or `rk²·AA*`) for the scalar operator
/// `A = d/dt + τ̄·2πiμt` on one component.
pub fn oscillator_oracle(module: &HeisenbergParams, grid: HeisenbergGrid) -> Vec<f64> {
    let g = grid.points;
    let d = cot_derivative(g, grid.half_width);
    let tb = module.tau.conj();
    let a = Mat::<C64>::from_fn(g, g, |i, j| {
        let diag = if i == j { tb * C64::new(0.0, 2.0 * PI * module.slope * grid.t(i)) } else { C64::new(0.0, 0.0) };
        C64::new(d[(i, j)], 0.0) + diag
    });
    let l = if module.slope > 0.0 { a.adjoint() * &a } else { &a * a.adjoint() };
    let l = l * faer::Scale(C64::new(module.rank * module.rank, 0.0));
    let mut v: Vec<f64> = l.self_adjoint_eigenvalues(Side::Lower).unwrap().into_iter().collect();
    v.sort_by(f64::total_cmp);
    v
}
