//! Arithmetic in the smooth noncommutative torus.
//!
//! Elements are finite Fourier series `Σ a_{m,n} U₁^m U₂^n` stored in the
//! normal order `U₁` before `U₂`, with `U₂U₁ = e^{2πiθ} U₁U₂`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use num_complex::Complex64 as C64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficients with magnitude below this are dropped after every operation.
pub const PRUNE: f64 = 1e-15;

/// Torus slope and complex structure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgebraParams {
    pub theta: f64,
    pub tau: C64,
}

impl AlgebraParams {
    pub fn new(theta: f64, tau: C64) -> Result<Self> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::InvalidParams(format!("theta = {theta} not in (0,1)")));
        }
        if !(tau.im > 0.0) || !tau.re.is_finite() {
            return Err(Error::InvalidParams(format!("Im tau = {} must be positive", tau.im)));
        }
        Ok(Self { theta, tau })
    }

    /// The golden-mean slope with `τ = 0.3 + 1.1i`, used as a default test torus.
    pub fn standard() -> Self {
        Self { theta: (5f64.sqrt() - 1.0) / 2.0, tau: C64::new(0.3, 1.1) }
    }

    /// `e^{2πiθk}` with the argument reduced mod 1 first.
    pub fn phase(&self, k: i64) -> C64 {
        let x = self.theta * k as f64;
        let r = x - x.round();
        C64::from_polar(1.0, 2.0 * PI * r)
    }

    /// Metric `g` of the Dirichlet form: `[[1, Re τ], [Re τ, |τ|²]]`.
    pub fn metric(&self) -> [[f64; 2]; 2] {
        [[1.0, self.tau.re], [self.tau.re, self.tau.norm_sqr()]]
    }

    /// Multiplier `m² + 2Re τ·mn + |τ|²n²` of `δ_τ δ_τ*`.
    pub fn laplace_multiplier(&self, m: i64, n: i64) -> f64 {
        let (m, n) = (m as f64, n as f64);
        m * m + 2.0 * self.tau.re * m * n + self.tau.norm_sqr() * n * n
    }
}

/// Exponent pair of the monomial `U₁^m U₂^n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FourierIndex {
    pub m: i64,
    pub n: i64,
}

/// Which Dirichlet square to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SquareKind {
    Re,
    Im,
}

/// Finitely supported element of the smooth noncommutative torus.
#[derive(Clone, Debug, PartialEq)]
pub struct TorusElement {
    params: AlgebraParams,
    coeffs: BTreeMap<(i64, i64), C64>,
}

impl TorusElement {
    pub fn zero(params: AlgebraParams) -> Self {
        Self { params, coeffs: BTreeMap::new() }
    }

    pub fn one(params: AlgebraParams) -> Self {
        Self::scalar(params, C64::new(1.0, 0.0))
    }

    pub fn scalar(params: AlgebraParams, c: C64) -> Self {
        Self::monomial(params, 0, 0, c)
    }

    /// `c · U₁^m U₂^n`.
    pub fn monomial(params: AlgebraParams, m: i64, n: i64, c: C64) -> Self {
        let mut e = Self::zero(params);
        e.insert(m, n, c);
        e
    }

    pub fn from_coeffs<I>(params: AlgebraParams, it: I) -> Self
    where
        I: IntoIterator<Item = ((i64, i64), C64)>,
    {
        let mut e = Self::zero(params);
        for ((m, n), c) in it {
            e.insert(m, n, c);
        }
        e
    }

    /// `x + x*` for `x` given by coefficients; always self-adjoint.
    pub fn hermitian_from<I>(params: AlgebraParams, it: I) -> Self
    where
        I: IntoIterator<Item = ((i64, i64), C64)>,
    {
        let x = Self::from_coeffs(params, it);
        &x + &x.star()
    }

    fn insert(&mut self, m: i64, n: i64, c: C64) {
        let slot = self.coeffs.entry((m, n)).or_insert(C64::new(0.0, 0.0));
        *slot += c;
        if slot.norm() < PRUNE {
            self.coeffs.remove(&(m, n));
        }
    }

    fn pruned(mut self) -> Self {
        self.coeffs.retain(|_, c| c.norm() >= PRUNE);
        self
    }

    pub fn params(&self) -> &AlgebraParams {
        &self.params
    }

    pub fn coeff(&self, m: i64, n: i64) -> C64 {
        self.coeffs.get(&(m, n)).copied().unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (FourierIndex, C64)> + '_ {
        self.coeffs.iter().map(|(&(m, n), &c)| (FourierIndex { m, n }, c))
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Largest `max(|m|,|n|)` in the support (0 for the empty element).
    pub fn support_radius(&self) -> usize {
        self.coeffs.keys().map(|&(m, n)| m.unsigned_abs().max(n.unsigned_abs()) as usize).max().unwrap_or(0)
    }

    /// ℓ¹ norm of the coefficients.
    pub fn l1_norm(&self) -> f64 {
        self.coeffs.values().map(|c| c.norm()).sum()
    }

    /// Largest coefficient magnitude.
    pub fn sup_norm(&self) -> f64 {
        self.coeffs.values().map(|c| c.norm()).fold(0.0, f64::max)
    }

    pub fn scale(&self, s: C64) -> Self {
        Self { params: self.params, coeffs: self.coeffs.iter().map(|(&k, &c)| (k, c * s)).collect() }.pruned()
    }

    pub fn scale_re(&self, s: f64) -> Self {
        self.scale(C64::new(s, 0.0))
    }

    fn check(&self, other: &Self) -> Result<()> {
        if self.params != other.params {
            return Err(Error::ParamsMismatch);
        }
        Ok(())
    }

    pub fn checked_add(&self, other: &Self) -> Result<Self> {
        self.check(other)?;
        let mut out = self.clone();
        for (&(m, n), &c) in &other.coeffs {
            out.insert(m, n, c);
        }
        Ok(out)
    }

    /// Apply a coefficientwise multiplier `(m, n) ↦ w(m, n)`.
    pub fn map_multiplier(&self, w: impl Fn(i64, i64) -> C64) -> Self {
        Self {
            params: self.params,
            coeffs: self.coeffs.iter().map(|(&(m, n), &c)| ((m, n), c * w(m, n))).collect(),
        }
        .pruned()
    }

    /// Keep only coefficients with `max(|m|,|n|) <= r`.
    pub fn restrict(&self, r: usize) -> Self {
        let r = r as i64;
        Self {
            params: self.params,
            coeffs: self.coeffs.iter().filter(|(&(m, n), _)| m.abs() <= r && n.abs() <= r).map(|(&k, &c)| (k, c)).collect(),
        }
    }

    /// Sup-norm distance between two elements.
    pub fn distance(&self, other: &Self) -> f64 {
        (self - other).sup_norm()
    }

    /// `‖a − a*‖₁`.
    pub fn self_adjoint_residual(&self) -> f64 {
        (self - &self.star()).l1_norm()
    }

    pub fn is_self_adjoint(&self, tol: f64) -> bool {
        self.self_adjoint_residual() <= tol * self.l1_norm().max(1.0)
    }

    pub fn require_self_adjoint(&self) -> Result<()> {
        let residual = self.self_adjoint_residual();
        if residual > 1e-10 * self.l1_norm().max(1.0) {
            return Err(Error::NotSelfAdjoint { residual });
        }
        Ok(())
    }

    /// Twisted convolution product.
    pub fn multiply(&self, other: &Self) -> Result<Self> {
        self.check(other)?;
        let mut acc: BTreeMap<(i64, i64), C64> = BTreeMap::new();
        for (&(a, b), &x) in &self.coeffs {
            for (&(p, q), &y) in &other.coeffs {
                let c = x * y * self.params.phase(b * p);
                *acc.entry((a + p, b + q)).or_default() += c;
            }
        }
        Ok(Self { params: self.params, coeffs: acc }.pruned())
    }

    /// Involution: `(c U₁^m U₂^n)* = c̄ e^{2πiθmn} U₁^{-m} U₂^{-n}`.
    pub fn star(&self) -> Self {
        Self {
            params: self.params,
            coeffs: self.coeffs.iter().map(|(&(m, n), &c)| ((-m, -n), c.conj() * self.params.phase(m * n))).collect(),
        }
    }

    /// The normalized trace: coefficient of the unit.
    pub fn trace0(&self) -> C64 {
        self.coeff(0, 0)
    }

    /// Basic derivation `δ_j` (j = 1 or 2).
    pub fn derive(&self, j: usize) -> Self {
        match j {
            1 => self.map_multiplier(|m, _| C64::new(m as f64, 0.0)),
            2 => self.map_multiplier(|_, n| C64::new(n as f64, 0.0)),
            _ => panic!("derivation index must be 1 or 2, got {j}"),
        }
    }

    /// `δ^γ`: multiplier `m^{γ₁} n^{γ₂}`.
    pub fn delta_multi(&self, g: (u32, u32)) -> Self {
        self.map_multiplier(|m, n| C64::new((m as f64).powi(g.0 as i32) * (n as f64).powi(g.1 as i32), 0.0))
    }

    /// `δ_τ = δ₁ + τ̄ δ₂`.
    pub fn delta_tau(&self) -> Self {
        let tb = self.params.tau.conj();
        self.map_multiplier(|m, n| m as f64 + tb * n as f64)
    }

    /// `δ_τ* = δ₁ + τ δ₂`.
    pub fn delta_tau_star(&self) -> Self {
        let t = self.params.tau;
        self.map_multiplier(|m, n| m as f64 + t * n as f64)
    }

    /// `δ₁² + 2Re τ δ₁δ₂ + |τ|² δ₂²` applied to `h`.
    pub fn conformal_laplacian_of(&self) -> Result<Self> {
        self.require_self_adjoint()?;
        let p = self.params;
        Ok(self.map_multiplier(|m, n| C64::new(p.laplace_multiplier(m, n), 0.0)))
    }

    /// Dirichlet squares `□_Re(h)` and `□_Im(h)`.
    pub fn dirichlet_square(&self, kind: SquareKind) -> Result<Self> {
        self.require_self_adjoint()?;
        match kind {
            SquareKind::Re => {
                let (d1, d2) = (self.derive(1), self.derive(2));
                let t = self.params.tau;
                let mixed = &d1.multiply(&d2)? + &d2.multiply(&d1)?;
                Ok(&(&d1.multiply(&d1)? + &mixed.scale_re(t.re)) + &d2.multiply(&d2)?.scale_re(t.norm_sqr()))
            }
            SquareKind::Im => {
                let (a, b) = (self.delta_tau(), self.delta_tau_star());
                Ok((&a.multiply(&b)? - &b.multiply(&a)?).scale_re(0.5))
            }
        }
    }

    /// Random self-adjoint element with support radius `radius` and ℓ¹ norm `l1`.
    pub fn random_self_adjoint<R: Rng>(params: AlgebraParams, radius: i64, l1: f64, rng: &mut R) -> Self {
        loop {
            let mut x = Self::zero(params);
            for m in -radius..=radius {
                for n in -radius..=radius {
                    let c = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                    x.insert(m, n, c);
                }
            }
            let h = &x + &x.star();
            let nrm = h.l1_norm();
            if nrm > 1e-6 {
                return h.scale_re(l1 / nrm);
            }
        }
    }

    pub fn to_json(&self, selfadjoint: bool) -> ElementJson {
        ElementJson {
            theta: self.params.theta,
            tau: [self.params.tau.re, self.params.tau.im],
            coeffs: self.coeffs.iter().map(|(&(m, n), c)| CoeffJson { m, n, re: c.re, im: c.im }).collect(),
            selfadjoint: Some(selfadjoint),
        }
    }

    pub fn from_json(j: &ElementJson) -> Result<Self> {
        let params = AlgebraParams::new(j.theta, C64::new(j.tau[0], j.tau[1]))?;
        let e = Self::from_coeffs(params, j.coeffs.iter().map(|c| ((c.m, c.n), C64::new(c.re, c.im))));
        if j.selfadjoint == Some(true) {
            e.require_self_adjoint()?;
        }
        Ok(e)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Self::from_json(&serde_json::from_str(s)?)
    }
}

/// On-disk form of an element.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ElementJson {
    pub theta: f64,
    pub tau: [f64; 2],
    pub coeffs: Vec<CoeffJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selfadjoint: Option<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoeffJson {
    pub m: i64,
    pub n: i64,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

pub fn multiply(a: &TorusElement, b: &TorusElement) -> Result<TorusElement> {
    a.multiply(b)
}

pub fn star(a: &TorusElement) -> TorusElement {
    a.star()
}

pub fn trace0(a: &TorusElement) -> C64 {
    a.trace0()
}

pub fn derive(a: &TorusElement, j: usize) -> TorusElement {
    a.derive(j)
}

pub fn delta_tau(a: &TorusElement) -> TorusElement {
    a.delta_tau()
}

pub fn delta_tau_star(a: &TorusElement) -> TorusElement {
    a.delta_tau_star()
}

pub fn conformal_laplacian_of(h: &TorusElement) -> Result<TorusElement> {
    h.conformal_laplacian_of()
}

pub fn dirichlet_square(h: &TorusElement, kind: SquareKind) -> Result<TorusElement> {
    h.dirichlet_square(kind)
}

impl Add for &TorusElement {
    type Output = TorusElement;
    fn add(self, rhs: &TorusElement) -> TorusElement {
        self.checked_add(rhs).expect("params mismatch in add")
    }
}

impl Sub for &TorusElement {
    type Output = TorusElement;
    fn sub(self, rhs: &TorusElement) -> TorusElement {
        self.checked_add(&rhs.scale_re(-1.0)).expect("params mismatch in sub")
    }
}

impl Neg for &TorusElement {
    type Output = TorusElement;
    fn neg(self) -> TorusElement {
        self.scale_re(-1.0)
    }
}

impl Mul for &TorusElement {
    type Output = TorusElement;
    fn mul(self, rhs: &TorusElement) -> TorusElement {
        self.multiply(rhs).expect("params mismatch in mul")
    }
}
