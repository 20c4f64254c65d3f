//! The entire functions defining the modular curvature.
//!
//! `K̃₀(s) = 4(s·coth(s/2) − 2)/s²` is the master function. `K₀`, `K₊` are
//! rescalings of it, and `H̃₀` is assembled from divided differences of `K̃₀`
//! wherever the closed form of `H₀` loses accuracy.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::quad::gauss_legendre;

/// Kernel selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelKind {
    K0,
    H0,
    Ktilde0,
    Htilde0,
    Kplus,
}

impl KernelKind {
    pub fn is_bivariate(self) -> bool {
        matches!(self, KernelKind::H0 | KernelKind::Htilde0)
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "k0" => Some(Self::K0),
            "h0" => Some(Self::H0),
            "ktilde0" | "kt0" => Some(Self::Ktilde0),
            "htilde0" | "ht0" => Some(Self::Htilde0),
            "kplus" | "k+" => Some(Self::Kplus),
            _ => None,
        }
    }
}

/// Number of even Taylor terms kept in the series branches.
pub const SERIES_TERMS: usize = 12;

/// Below this distance from a singular line the closed form of `H₀` is avoided.
pub const H0_BOX: f64 = 0.2;

/// Beyond this size the closed form of `H₀` is avoided (cosh/sinh overflow).
const H0_CLOSED_MAX: f64 = 60.0;

/// Divided differences with `|x − y|` below this go through quadrature of `f'`.
const DD_DIRECT_MIN: f64 = 1.0;

/// Internal series radius for `K̃₀'`.
const DERIV_SERIES_RADIUS: f64 = 0.5;

/// Singularity-safe evaluator for one curvature kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureKernel {
    pub kind: KernelKind,
    pub series_radius: f64,
}

impl CurvatureKernel {
    pub fn new(kind: KernelKind) -> Self {
        let series_radius = if kind.is_bivariate() { H0_BOX } else { 0.1 };
        Self { kind, series_radius }
    }

    /// Univariate evaluation; bivariate kinds are evaluated on the diagonal
    /// slice `(s, 0)`.
    pub fn eval(&self, s: f64) -> f64 {
        self.eval2(s, 0.0)
    }

    /// Evaluate `f(s)` for univariate kinds (ignoring `t`) or `H(s, t)`.
    pub fn eval2(&self, s: f64, t: f64) -> f64 {
        let r = self.series_radius;
        match self.kind {
            KernelKind::K0 => k0_with(s, r),
            KernelKind::Ktilde0 => ktilde0_with(s, r),
            KernelKind::Kplus => 0.5 * ktilde0_with(s, r),
            KernelKind::H0 => h0_with(s, t, r),
            KernelKind::Htilde0 => htilde0_with(s, t, r),
        }
    }
}

/// `B_k / k!` for `k = 0..=n` from the generating function `x/(eˣ−1)`:
/// `Σ_{k=0}^{n} b_k/(n+1−k)! = 0` for `n ≥ 1`.
pub fn bernoulli_over_factorial(n: usize) -> Vec<f64> {
    let mut inv_fact = vec![1.0f64; n + 2];
    for k in 1..n + 2 {
        inv_fact[k] = inv_fact[k - 1] / k as f64;
    }
    let mut b = vec![0.0f64; n + 1];
    b[0] = 1.0;
    for m in 1..=n {
        let s: f64 = (0..m).map(|k| b[k] * inv_fact[m + 1 - k]).sum();
        b[m] = -s;
    }
    b
}

/// Taylor coefficients `c_n = 8 B_{2n}/(2n)!` of `K̃₀(s) = Σ c_n s^{2n−2}`, n ≥ 1.
pub fn ktilde0_taylor() -> &'static [f64] {
    static COEFFS: OnceLock<Vec<f64>> = OnceLock::new();
    COEFFS.get_or_init(|| {
        let b = bernoulli_over_factorial(2 * SERIES_TERMS + 2);
        (1..=SERIES_TERMS + 1).map(|n| 8.0 * b[2 * n]).collect()
    })
}

/// Second route to the same coefficients: `8B_{2n}/(2n)! = (−1)^{n+1}·16ζ(2n)/(2π)^{2n}`.
pub fn ktilde0_taylor_zeta(n: usize) -> f64 {
    let z = zeta_even(n);
    let sign = if n % 2 == 1 { 1.0 } else { -1.0 };
    sign * 16.0 * z / (2.0 * std::f64::consts::PI).powi(2 * n as i32)
}

/// `ζ(2n)` by direct summation with an Euler–Maclaurin tail.
fn zeta_even(n: usize) -> f64 {
    let s = 2.0 * n as f64;
    let cutoff = 64usize;
    let head: f64 = (1..cutoff).rev().map(|k| (k as f64).powf(-s)).sum();
    let a = cutoff as f64;
    // ∫_a^∞ x^{-s} + a^{-s}/2 + s a^{-s-1}/12 − s(s+1)(s+2) a^{-s-3}/720
    let tail = a.powf(1.0 - s) / (s - 1.0) + 0.5 * a.powf(-s) + s * a.powf(-s - 1.0) / 12.0
        - s * (s + 1.0) * (s + 2.0) * a.powf(-s - 3.0) / 720.0;
    head + tail
}

fn series(s: f64) -> f64 {
    let c = ktilde0_taylor();
    let x = s * s;
    c[..SERIES_TERMS].iter().rev().fold(0.0, |acc, &ck| acc * x + ck)
}

fn series_deriv(s: f64) -> f64 {
    // d/ds Σ c_n s^{2n-2} = Σ c_n (2n−2) s^{2n−3}
    let c = ktilde0_taylor();
    let x = s * s;
    let mut acc = 0.0;
    for n in (2..=SERIES_TERMS).rev() {
        acc = acc * x + c[n - 1] * (2 * n - 2) as f64;
    }
    acc * s
}

/// `coth(x)` safe for large `|x|`.
fn coth(x: f64) -> f64 {
    1.0 / x.tanh()
}

fn ktilde0_with(s: f64, radius: f64) -> f64 {
    if s.abs() < radius {
        series(s)
    } else {
        4.0 * (s * coth(s / 2.0) - 2.0) / (s * s)
    }
}

/// `K̃₀(s) = 4(s·coth(s/2) − 2)/s²`.
pub fn ktilde0(s: f64) -> f64 {
    ktilde0_with(s, 0.1)
}

/// Derivative of `K̃₀`.
pub fn ktilde0_deriv(s: f64) -> f64 {
    if s.abs() < DERIV_SERIES_RADIUS {
        return series_deriv(s);
    }
    let h = s / 2.0;
    let c = coth(h);
    let csch2 = if h.abs() > 350.0 { 0.0 } else { 1.0 / h.sinh().powi(2) };
    let g = s * c - 2.0;
    let dg = c - h * csch2;
    4.0 * (dg / (s * s) - 2.0 * g / (s * s * s))
}

/// `s / (4 sinh(s/2))` with the limit ½ at 0 and 0 for huge `|s|`.
fn half_ratio(s: f64) -> f64 {
    if s.abs() < 1e-8 {
        0.5 - s * s / 48.0
    } else if s.abs() > 1400.0 {
        0.0
    } else {
        s / (4.0 * (s / 2.0).sinh())
    }
}

fn k0_with(s: f64, radius: f64) -> f64 {
    if s.abs() > 700.0 {
        return 0.0;
    }
    ktilde0_with(s, radius) * half_ratio(s)
}

/// `K₀(s) = (−2 + s·coth(s/2)) / (s·sinh(s/2))`.
pub fn k0(s: f64) -> f64 {
    k0_with(s, 0.1)
}

/// Nonnegative `K₊(s) = 2coth(s/2)/s − 4/s² = ½K̃₀(s)`.
pub fn kplus(s: f64) -> f64 {
    0.5 * ktilde0(s)
}

/// Divided difference `f[x, y]` of `K̃₀`, stable for nearby arguments.
pub fn ktilde0_dd(x: f64, y: f64) -> f64 {
    let d = x - y;
    if d.abs() >= DD_DIRECT_MIN {
        return (ktilde0(x) - ktilde0(y)) / d;
    }
    let (nodes, weights) = gauss_legendre(24);
    // ∫_0^1 f'(y + u d) du with u = (1+z)/2
    0.5 * nodes.iter().zip(weights).map(|(&z, &w)| w * ktilde0_deriv(y + 0.5 * (1.0 + z) * d)).sum::<f64>()
}

/// `H̃₀(s, t)` through the divided-difference identity.
pub fn htilde0_fi(s: f64, t: f64) -> f64 {
    -2.0 * (ktilde0_dd(t, -s) + ktilde0_dd(s + t, t) - ktilde0_dd(s + t, s))
}

/// Closed form of `H₀(s, t)`; inaccurate near the singular lines.
pub fn h0_closed(s: f64, t: f64) -> f64 {
    let u = s + t;
    let num = t * u * s.cosh() - s * u * t.cosh() + (s - t) * (u + s.sinh() + t.sinh() - u.sinh());
    let den = s * t * u * (s / 2.0).sinh() * (t / 2.0).sinh() * (u / 2.0).sinh().powi(2);
    num / den
}

fn in_closed_region(s: f64, t: f64, radius: f64) -> bool {
    let u = s + t;
    s.abs().min(t.abs()).min(u.abs()) > radius && s.abs().max(t.abs()).max(u.abs()) < H0_CLOSED_MAX
}

fn htilde0_with(s: f64, t: f64, radius: f64) -> f64 {
    if in_closed_region(s, t, radius) {
        let u = s + t;
        4.0 * (u / 2.0).sinh() / u * h0_closed(s, t)
    } else {
        htilde0_fi(s, t)
    }
}

fn h0_with(s: f64, t: f64, radius: f64) -> f64 {
    if in_closed_region(s, t, radius) {
        h0_closed(s, t)
    } else {
        let u = s + t;
        if u.abs() > 700.0 {
            return 0.0;
        }
        htilde0_fi(s, t) * half_ratio(u)
    }
}

/// `H₀(s, t)`.
pub fn h0(s: f64, t: f64) -> f64 {
    h0_with(s, t, H0_BOX)
}

/// `H̃₀(s, t) = 4 sinh((s+t)/2)/(s+t) · H₀(s, t)`.
pub fn htilde0(s: f64, t: f64) -> f64 {
    htilde0_with(s, t, H0_BOX)
}

/// Residual of the functional identity at `(s, t)`: closed-form route versus
/// the three-term divided-difference combination.
pub fn fi_residual(s: f64, t: f64) -> f64 {
    let lhs = -0.5 * htilde0(s, t);
    let rhs = ktilde0_dd(t, -s) + ktilde0_dd(s + t, t) - ktilde0_dd(s + t, s);
    (lhs - rhs).abs()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn values_at_zero() {
        assert!(close(k0(0.0), 1.0 / 3.0, 1e-15));
        assert!(close(ktilde0(0.0), 2.0 / 3.0, 1e-15));
        assert!(close(kplus(0.0), 1.0 / 3.0, 1e-15));
        assert_eq!(h0(0.0, 0.0), 0.0);
    }

    // 60-digit evaluations of the closed forms (mpmath), frozen.
    #[test]
    fn high_precision_values() {
        assert!(close(k0(1.0), 0.31463229856447081494, 1e-14));
        assert!(close(k0(2.5), 0.23649820039384218133, 1e-14));
        assert!(close(k0(-4.0), 0.14814871825919253007, 1e-14));
        assert!(close(k0(0.05), 0.33328472702711966404, 1e-14));
        assert!(close(ktilde0(7.0), 0.40920636730980443031, 1e-14));
        assert!(close(h0(0.7, 1.3), 0.009744925641708493797, 1e-13));
        assert!(close(h0(3.0, 2.0), -0.0041175632091154530316, 1e-13));
        assert!(close(h0(-2.0, 0.5), 0.04420379993085643442, 1e-13));
        assert!(close(htilde0(0.5, -0.2), -0.030868309719630522977, 1e-13));
        assert!(close(htilde0(2.0, -1.5), -0.1388733713361606115, 1e-13));
    }

    // Limits computed at 150 digits by perturbing off the singular line.
    #[test]
    fn seam_limits() {
        assert!(close(h0(1.0, -1.0), -0.042908432041060489817, 1e-12));
        assert!(close(htilde0(1.0, -1.0), -0.085816864082120979633, 1e-12));
        assert!(close(h0(0.0, 1.0), 0.02034407947396520442, 1e-12));
        assert!(close(h0(2.0, 0.0), -0.031566464249938209832, 1e-12));
        assert!(close(h0(0.5, -0.5), -0.022025450013341812087, 1e-12));
    }

    #[test]
    fn parity_and_antisymmetry() {
        for i in -40..=40 {
            let s = 0.37 * i as f64;
            assert_eq!(k0(s), k0(-s));
            assert_eq!(kplus(s), kplus(-s));
            assert!(kplus(s) >= 0.0);
        }
        for &(s, t) in &[(0.7, 1.3), (2.0, -0.4), (0.05, 0.3)] {
            assert!((h0(s, t) + h0(t, s)).abs() < 1e-12);
            assert!((h0(-s, -t) + h0(s, t)).abs() < 1e-12);
        }
    }

    #[test]
    fn seam_continuity() {
        let eps = 1e-9;
        for kind in [KernelKind::K0, KernelKind::Ktilde0, KernelKind::Kplus] {
            let k = CurvatureKernel::new(kind);
            let r = k.series_radius;
            let wide = CurvatureKernel { kind, series_radius: 10.0 };
            let narrow = CurvatureKernel { kind, series_radius: 0.0 };
            for s in [r - eps, r + eps, -r] {
                assert!((wide.eval(s) - narrow.eval(s)).abs() < 1e-11, "{kind:?} at {s}");
            }
        }
        for &(s, t) in &[(H0_BOX + 1e-9, 1.1), (-0.9, H0_BOX + 1e-9), (1.0, -1.0 + H0_BOX + 1e-9)] {
            let closed = 4.0 * ((s + t) / 2.0).sinh() / (s + t) * h0_closed(s, t);
            assert!((closed - htilde0_fi(s, t)).abs() < 1e-11);
        }
    }

    #[test]
    fn bernoulli_routes_agree() {
        let c = ktilde0_taylor();
        assert!(close(c[0], 2.0 / 3.0, 1e-15));
        for n in 1..=8 {
            assert!(close(c[n - 1], ktilde0_taylor_zeta(n), 1e-12), "n = {n}");
        }
    }

    #[test]
    fn derivative_matches_difference_quotient() {
        for &s in &[0.3, 0.49, 0.51, 1.7, -3.2, 12.0] {
            let h = 1e-5;
            let fd = (ktilde0(s + h) - ktilde0(s - h)) / (2.0 * h);
            assert!((fd - ktilde0_deriv(s)).abs() < 1e-8, "{s}");
        }
    }

    #[test]
    fn large_arguments_are_finite() {
        assert_eq!(k0(800.0), 0.0);
        assert!(ktilde0(1e4).is_finite());
        assert!(h0(80.0, -20.0).is_finite());
        assert!(htilde0(300.0, 200.0).is_finite());
    }
}
