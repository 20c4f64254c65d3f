//! Modular curvature density, the determinant functional `F`, its gradient
//! and the Polyakov-type log-determinant.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gns::GnsTruncation;
use crate::modfunc::calc::{CalcMethod, ModularCalcContext};
use crate::modfunc::kernels::{h0, htilde0, k0, kplus, ktilde0};
use crate::nctorus::{AlgebraParams, TorusElement};

/// Normalization of the curvature density.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefactorConvention {
    /// `K_k = -(π/2Imτ)[K₀(∇)(△h) + ½H₀(∇⁽¹⁾,∇⁽²⁾)(□_Re h)]`, `a₂(a) = φ₀(a K_k)`.
    Cm2014,
    /// `μ·1 + (π/Imτ)[K₀(∇)(△h) + ½H₀(∇⁽¹⁾,∇⁽²⁾)(□_Re h)]`, `a₂(a) = lm_a2_factor·|rank|·φ₀(a·D)`.
    Lm2015,
}

impl PrefactorConvention {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cm2014" | "cm" => Some(Self::Cm2014),
            "lm2015" | "lm" => Some(Self::Lm2015),
            _ => None,
        }
    }
}

/// Numerical conventions fixed once by calibration and read back by consumers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub version: u32,
    /// Multiplies the Lebesgue measure `dξ` in the symbol integral for `a₂`.
    pub measure_factor: f64,
    /// Sign of the parametrix contribution to `a₂`.
    pub parametrix_sign: f64,
    /// Extra factor on the CM density relative to the heat coefficient.
    pub cm_scale: f64,
    /// `a₂(a) = lm_a2_factor · |rank| · φ₀(a·D)` on Heisenberg modules.
    pub lm_a2_factor: f64,
}

impl Default for Conventions {
    fn default() -> Self {
        Self { version: 1, measure_factor: 1.0, parametrix_sign: 1.0, cm_scale: 1.0, lm_a2_factor: -0.5 }
    }
}

impl Conventions {
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        let c: Self = serde_json::from_str(&s)?;
        if c.version != 1 {
            return Err(Error::Config(format!("unsupported convention version {}", c.version)));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Curvature density with its Gauss–Bonnet residual.
#[derive(Clone, Debug)]
pub struct CurvatureReport {
    pub density: TorusElement,
    pub gauss_bonnet_residual: f64,
    pub prefactor_convention: PrefactorConvention,
    /// Largest coefficient left on the outer ring of the truncation.
    pub truncation_residual: f64,
}

/// Scale-invariant functional value and gradient.
#[derive(Clone, Debug)]
pub struct Functional {
    pub value: f64,
    pub gradient: TorusElement,
}

/// The pairs `(g_ab δ_a h, δ_b h)` whose products sum to `□_Re(h)`.
pub fn dirichlet_pairs(h: &TorusElement) -> Vec<(TorusElement, TorusElement)> {
    let g = h.params().metric();
    let d = [h.derive(1), h.derive(2)];
    let mut out = Vec::with_capacity(4);
    for a in 0..2 {
        for b in 0..2 {
            if g[a][b] != 0.0 {
                out.push((d[a].scale_re(g[a][b]), d[b].clone()));
            }
        }
    }
    out
}

/// `(f(∇)(△h), H(∇⁽¹⁾,∇⁽²⁾)(□_Re h))` and the larger truncation residual.
fn kernel_parts(
    ctx: &ModularCalcContext,
    f: impl Fn(f64) -> f64,
    hk: impl Fn(f64, f64) -> f64 + Sync,
) -> Result<(TorusElement, TorusElement, f64)> {
    let h = ctx.h();
    let lap = h.conformal_laplacian_of()?;
    let a = ctx.apply1(f, &lap)?;
    let b = ctx.apply2(hk, &dirichlet_pairs(h))?;
    Ok((a.element, b.element, a.residual.max(b.residual)))
}

fn context(h: &TorusElement, trunc: GnsTruncation) -> Result<ModularCalcContext> {
    ModularCalcContext::new(h, trunc, CalcMethod::Auto)
}

/// `K_k` in the CM normalization.
pub fn modular_curvature(h: &TorusElement, trunc: GnsTruncation) -> Result<CurvatureReport> {
    modular_curvature_in(&context(h, trunc)?, &Conventions::default())
}

pub fn modular_curvature_in(ctx: &ModularCalcContext, conv: &Conventions) -> Result<CurvatureReport> {
    let p = ctx.params();
    let (a, b, res) = kernel_parts(ctx, k0, h0)?;
    let density = (&a + &b.scale_re(0.5)).scale_re(-conv.cm_scale * PI / (2.0 * p.tau.im));
    Ok(CurvatureReport {
        gauss_bonnet_residual: density.trace0().norm(),
        density,
        prefactor_convention: PrefactorConvention::Cm2014,
        truncation_residual: res,
    })
}

/// `μ·1 + (π/Imτ)[K₀(∇)(△h) + ½H₀(∇⁽¹⁾,∇⁽²⁾)(□_Re h)]`.
pub fn heisenberg_curvature_density(h: &TorusElement, mu: f64, trunc: GnsTruncation) -> Result<CurvatureReport> {
    heisenberg_curvature_density_in(&context(h, trunc)?, mu)
}

pub fn heisenberg_curvature_density_in(ctx: &ModularCalcContext, mu: f64) -> Result<CurvatureReport> {
    let p = ctx.params();
    let (a, b, res) = kernel_parts(ctx, k0, h0)?;
    let body = (&a + &b.scale_re(0.5)).scale_re(PI / p.tau.im);
    let density = &body + &TorusElement::scalar(p, C64::new(mu, 0.0));
    Ok(CurvatureReport {
        gauss_bonnet_residual: (density.trace0() - mu).norm(),
        density,
        prefactor_convention: PrefactorConvention::Lm2015,
        truncation_residual: res,
    })
}

/// Dedekind eta `e^{πiτ/12} Π (1 − q^n)`, `q = e^{2πiτ}`.
pub fn dedekind_eta(tau: C64) -> Result<C64> {
    if !(tau.im > 0.0) {
        return Err(Error::InvalidParams(format!("Im tau = {} must be positive", tau.im)));
    }
    let i = C64::new(0.0, 1.0);
    let q = (2.0 * PI * i * tau).exp();
    let mut prod = C64::new(1.0, 0.0);
    let mut qn = q;
    for _ in 0..10_000 {
        if qn.norm() < 1e-17 {
            break;
        }
        prod *= 1.0 - qn;
        qn *= q;
    }
    Ok((PI * i * tau / 12.0).exp() * prod)
}

/// `log(4π²|η(τ)|⁴)`.
pub fn log_flat_det(params: &AlgebraParams) -> Result<f64> {
    let eta = dedekind_eta(params.tau)?;
    Ok((4.0 * PI * PI).ln() + 4.0 * eta.norm().ln())
}

/// `(π/4Imτ) φ₀(K₊(∇⁽¹⁾)(□_Re h))`, nonpositive.
fn quadratic_term(ctx: &ModularCalcContext) -> Result<f64> {
    let p = ctx.params();
    let out = ctx.apply2(|s, _| kplus(s), &dirichlet_pairs(ctx.h()))?;
    Ok(PI / (4.0 * p.tau.im) * out.element.trace0().re)
}

/// `F(h) = −log(4π²|η|⁴) − (π/4Imτ) φ₀(K₊(∇⁽¹⁾)(□_Re h))` and its gradient.
pub fn f_functional(h: &TorusElement, trunc: GnsTruncation) -> Result<Functional> {
    let ctx = context(h, trunc)?;
    let value = -log_flat_det(h.params())? - quadratic_term(&ctx)?;
    Ok(Functional { value, gradient: grad_f_in(&ctx)? })
}

/// Value of `F` only.
pub fn f_value(h: &TorusElement, trunc: GnsTruncation) -> Result<f64> {
    let ctx = context(h, trunc)?;
    Ok(-log_flat_det(h.params())? - quadratic_term(&ctx)?)
}

/// `(π/4Imτ)[K̃₀(∇)(△h) + ½H̃₀(∇⁽¹⁾,∇⁽²⁾)(□_Re h)]`.
pub fn grad_f(h: &TorusElement, trunc: GnsTruncation) -> Result<TorusElement> {
    grad_f_in(&context(h, trunc)?)
}

pub fn grad_f_in(ctx: &ModularCalcContext) -> Result<TorusElement> {
    let p = ctx.params();
    let (a, b, _) = kernel_parts(ctx, ktilde0, htilde0)?;
    Ok((&a + &b.scale_re(0.5)).scale_re(PI / (4.0 * p.tau.im)))
}

/// Pieces of the Polyakov formula.
#[derive(Clone, Debug, Serialize)]
pub struct PolyakovReport {
    pub log_det: f64,
    pub log_phi_one: f64,
    pub quadratic: f64,
}

/// `log Det △_k = log(4π²|η|⁴) + log φ(1) + (π/4Imτ) φ₀(K₊(∇⁽¹⁾)(□_Re h))`,
/// with `φ(1) = φ₀(e^{-h})`.
pub fn polyakov_log_det(h: &TorusElement, trunc: GnsTruncation) -> Result<PolyakovReport> {
    let ctx = context(h, trunc)?;
    let phi1 = ctx.fn_of_h(|x| (-x).exp())?.element.trace0().re;
    if !(phi1 > 0.0) {
        return Err(Error::NonPositive(format!("phi(1) = {phi1}")));
    }
    let quadratic = quadratic_term(&ctx)?;
    let log_phi_one = phi1.ln();
    Ok(PolyakovReport { log_det: log_flat_det(h.params())? + log_phi_one + quadratic, log_phi_one, quadratic })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p() -> AlgebraParams {
        AlgebraParams::standard()
    }

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn dilaton() -> TorusElement {
        TorusElement::hermitian_from(p(), [((1, 0), c(0.12, 0.0)), ((0, 1), c(0.08, 0.03)), ((1, 1), c(0.05, 0.0))])
    }

    fn t(n: usize) -> GnsTruncation {
        GnsTruncation::new(n).unwrap()
    }

    #[test]
    fn eta_at_i() {
        let e = dedekind_eta(c(0.0, 1.0)).unwrap();
        assert!((e.norm() - 0.768_225_422_326_056_659).abs() < 1e-15);
        let tau = c(0.3, 1.1);
        let lhs = dedekind_eta(tau + 1.0).unwrap();
        let rhs = C64::from_polar(1.0, PI / 12.0) * dedekind_eta(tau).unwrap();
        assert!((lhs - rhs).norm() < 1e-14);
        assert!(dedekind_eta(c(0.0, 2.0)).unwrap().norm() < e.norm());
    }

    #[test]
    fn zero_and_scalar_dilaton_are_flat() {
        for h in [TorusElement::zero(p()), TorusElement::scalar(p(), c(0.4, 0.0))] {
            let r = modular_curvature(&h, t(4)).unwrap();
            assert!(r.density.l1_norm() < 1e-15);
            assert!(grad_f(&h, t(4)).unwrap().l1_norm() < 1e-15);
        }
        let f0 = f_value(&TorusElement::zero(p()), t(4)).unwrap();
        assert!((f0 + log_flat_det(&p()).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn frozen_curvature_probes() {
        let r = modular_curvature(&dilaton(), t(12)).unwrap();
        let u1 = TorusElement::hermitian_from(p(), [((1, 0), c(1.0, 0.0))]);
        let u2 = TorusElement::hermitian_from(p(), [((0, 1), c(1.0, 0.0))]);
        let v1 = u1.multiply(&r.density).unwrap().trace0().re;
        let v2 = u2.multiply(&r.density).unwrap().trace0().re;
        assert!((v1 + 0.114_118_010_459_19).abs() < 1e-10, "{v1}");
        assert!((v2 + 0.098_618_615_021_75).abs() < 1e-10, "{v2}");
        assert!(r.gauss_bonnet_residual < 1e-10);
        assert!(r.density.is_self_adjoint(1e-9));
    }

    #[test]
    fn heisenberg_density_relation() {
        let h = dilaton();
        let cm = modular_curvature(&h, t(10)).unwrap().density;
        let lm = heisenberg_curvature_density(&h, 0.0, t(10)).unwrap().density;
        assert!(cm.distance(&lm.scale_re(-0.5)) < 1e-14);
        let mu = heisenberg_curvature_density(&TorusElement::zero(p()), 0.7, t(4)).unwrap();
        assert!(mu.density.distance(&TorusElement::scalar(p(), c(0.7, 0.0))) < 1e-15);
    }

    #[test]
    fn scale_invariance_and_polyakov_identity() {
        let h = dilaton();
        let f = f_value(&h, t(10)).unwrap();
        for s in [1.0, -1.0, 0.3, -0.3] {
            let hs = &h + &TorusElement::scalar(p(), c(s, 0.0));
            assert!((f_value(&hs, t(10)).unwrap() - f).abs() < 1e-9);
        }
        let pr = polyakov_log_det(&h, t(10)).unwrap();
        assert!((f - (-pr.log_det + pr.log_phi_one)).abs() < 1e-12);
        let hc = TorusElement::scalar(p(), c(0.6, 0.0));
        let pc = polyakov_log_det(&hc, t(4)).unwrap();
        assert!((pc.log_det - (log_flat_det(&p()).unwrap() - 0.6)).abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let h = dilaton();
        let g = grad_f(&h, t(12)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let a = TorusElement::random_self_adjoint(p(), 1, 1.0, &mut rng);
            let eps = 1e-4;
            let fp = f_value(&(&h + &a.scale_re(eps)), t(12)).unwrap();
            let fm = f_value(&(&h - &a.scale_re(eps)), t(12)).unwrap();
            let fd = (fp - fm) / (2.0 * eps);
            let an = a.multiply(&g).unwrap().trace0().re;
            assert!((fd - an).abs() < 1e-5 * an.abs().max(1e-3), "fd {fd} vs {an}");
        }
    }

    #[test]
    fn flat_metric_minimizes() {
        let f0 = f_value(&TorusElement::zero(p()), t(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let h = TorusElement::random_self_adjoint(p(), 2, 0.8, &mut rng);
            assert!(f_value(&h, t(12)).unwrap() > f0);
        }
    }

    #[test]
    fn convention_file_round_trip() {
        let dir = std::env::temp_dir().join(format!("modcurv-conv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("conv.json");
        let c = Conventions::default();
        c.save(&path).unwrap();
        assert_eq!(Conventions::load(&path).unwrap(), c);
        std::fs::write(&path, r#"{"version":7,"measure_factor":1,"parametrix_sign":1,"cm_scale":1,"lm_a2_factor":-0.5}"#).unwrap();
        assert!(matches!(Conventions::load(&path), Err(Error::Config(_))));
    }
}
