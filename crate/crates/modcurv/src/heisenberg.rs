//! Discretized Heisenberg bimodules `ℰ(g, θ) = 𝒮(ℝ × ℤ_c)`.
//!
//! A section is sampled on the periodic grid `t_k = −L + 2Lk/G` for each of
//! the `|c|` components. Translations by arbitrary amounts are FFT phase-ramp
//! shifts, exact for band-limited samples.

use std::f64::consts::PI;

use faer::Mat;
use num_complex::Complex64 as C64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::curvature::{heisenberg_curvature_density, Conventions};
use crate::error::{Error, Result};
use crate::gns::{fit_trace_curve, GnsTruncation, HeatFit, HeatFitConfig, Spectral};
use crate::nctorus::{AlgebraParams, TorusElement};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };
const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Default relative spectral-tail tolerance for shifts and derivatives.
pub const TAIL_TOL: f64 = 1e-10;

fn modulo(a: i64, c: usize) -> usize {
    a.rem_euclid(c as i64) as usize
}

fn mod_inverse(d: i64, c: i64) -> Option<i64> {
    let (mut r0, mut r1) = (d.rem_euclid(c), c);
    let (mut s0, mut s1) = (1i64, 0i64);
    while r1 != 0 {
        let q = r0 / r1;
        (r0, r1) = (r1, r0 - q * r1);
        (s0, s1) = (s1, s0 - q * s1);
    }
    (r0 == 1).then(|| s0.rem_euclid(c))
}

/// `g = (a, b, c, d) ∈ SL(2, ℤ)` with derived rank, degree and slope.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HeisenbergParams {
    pub g: [i64; 4],
    pub theta: f64,
    pub tau: C64,
    pub theta_prime: f64,
    /// `cθ + d`.
    pub rank: f64,
    pub degree: i64,
    /// `c / (cθ + d)`.
    pub slope: f64,
}

impl HeisenbergParams {
    pub fn new(g: [i64; 4], theta: f64, tau: C64) -> Result<Self> {
        let [a, b, c, d] = g;
        if a * d - b * c != 1 {
            return Err(Error::InvalidParams(format!("det g = {} ≠ 1", a * d - b * c)));
        }
        if c == 0 {
            return Err(Error::TrivialBimodule);
        }
        AlgebraParams::new(theta, tau)?;
        let rank = c as f64 * theta + d as f64;
        Ok(Self {
            g,
            theta,
            tau,
            theta_prime: (a as f64 * theta + b as f64) / rank,
            rank,
            degree: c,
            slope: c as f64 / rank,
        })
    }

    pub fn components(&self) -> usize {
        self.g[2].unsigned_abs() as usize
    }

    /// `ℰ(g⁻¹, θ′)`, on which `A_θ` acts from the left.
    pub fn inverse(&self) -> Result<Self> {
        let [a, b, c, d] = self.g;
        let [a2, b2, c2, d2] = [d, -b, -c, a];
        let rank = c2 as f64 * self.theta_prime + d2 as f64;
        Ok(Self {
            g: [a2, b2, c2, d2],
            theta: self.theta_prime,
            tau: self.tau,
            theta_prime: (a2 as f64 * self.theta_prime + b2 as f64) / rank,
            rank,
            degree: c2,
            slope: c2 as f64 / rank,
        })
    }

    /// The right algebra `A_θ`.
    pub fn algebra(&self) -> AlgebraParams {
        AlgebraParams { theta: self.theta, tau: self.tau }
    }

    /// The left algebra `A_θ′`.
    pub fn left_algebra(&self) -> AlgebraParams {
        AlgebraParams { theta: self.theta_prime, tau: self.tau }
    }
}

/// Uniform periodic grid on `[−L, L)` with `G` points per component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeisenbergGrid {
    pub half_width: f64,
    pub points: usize,
}

impl Default for HeisenbergGrid {
    fn default() -> Self {
        Self { half_width: 12.0, points: 512 }
    }
}

impl HeisenbergGrid {
    pub fn new(half_width: f64, points: usize) -> Result<Self> {
        if !(half_width > 0.0) || points < 16 || !points.is_multiple_of(2) {
            return Err(Error::GridInsufficient(format!("L = {half_width}, G = {points}")));
        }
        Ok(Self { half_width, points })
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.half_width / self.points as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        -self.half_width + self.dx() * k as f64
    }

    /// Angular wavenumber of FFT bin `k`.
    pub fn wavenumber(&self, k: usize) -> f64 {
        let g = self.points;
        let kk = if k < g / 2 { k as f64 } else { k as f64 - g as f64 };
        PI / self.half_width * kk
    }
}

/// Samples of `f: ℝ × ℤ_c → ℂ`, stored component-major.
#[derive(Clone, Debug)]
pub struct HeisenbergSection {
    pub params: HeisenbergParams,
    pub grid: HeisenbergGrid,
    pub values: Vec<C64>,
}

impl HeisenbergSection {
    pub fn from_fn(params: HeisenbergParams, grid: HeisenbergGrid, f: impl Fn(f64, usize) -> C64) -> Self {
        let c = params.components();
        let mut values = Vec::with_capacity(c * grid.points);
        for al in 0..c {
            for k in 0..grid.points {
                values.push(f(grid.t(k), al));
            }
        }
        Self { params, grid, values }
    }

    /// `e^{−π s (t − t₀)²}` on component `α` (others zero).
    pub fn gaussian(params: HeisenbergParams, grid: HeisenbergGrid, s: f64, t0: f64, alpha: usize) -> Self {
        Self::from_fn(params, grid, |t, al| if al == alpha { C64::new((-PI * s * (t - t0).powi(2)).exp(), 0.0) } else { ZERO })
    }

    fn with_values(&self, values: Vec<C64>) -> Self {
        Self { params: self.params, grid: self.grid, values }
    }

    pub fn component(&self, alpha: usize) -> &[C64] {
        let g = self.grid.points;
        &self.values[alpha * g..(alpha + 1) * g]
    }

    pub fn add(&self, o: &Self, s: C64) -> Self {
        self.with_values(self.values.iter().zip(&o.values).map(|(a, b)| a + s * b).collect())
    }

    pub fn scale(&self, s: C64) -> Self {
        self.with_values(self.values.iter().map(|a| a * s).collect())
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn distance(&self, o: &Self) -> f64 {
        self.add(o, C64::new(-1.0, 0.0)).sup_norm()
    }

    /// Fraction of `L²` mass outside `[−L/2, L/2]`.
    pub fn tail_mass(&self) -> f64 {
        let g = self.grid.points;
        let (mut tail, mut all) = (0.0, 0.0);
        for (i, z) in self.values.iter().enumerate() {
            let w = z.norm_sqr();
            all += w;
            if self.grid.t(i % g).abs() > 0.5 * self.grid.half_width {
                tail += w;
            }
        }
        if all == 0.0 {
            0.0
        } else {
            tail / all
        }
    }

    /// `∫ conj(f₁) f₂ dt dα` (trapezoid, counting measure on `ℤ_c`).
    pub fn l2_inner(&self, o: &Self) -> C64 {
        self.values.iter().zip(&o.values).map(|(a, b)| a.conj() * b).sum::<C64>() * self.grid.dx()
    }

    /// Pointwise multiplication by `φ(t, α)`.
    pub fn mul_fn(&self, f: impl Fn(f64, usize) -> C64) -> Self {
        let g = self.grid.points;
        self.with_values(self.values.iter().enumerate().map(|(i, z)| z * f(self.grid.t(i % g), i / g)).collect())
    }

    /// `g(t, α) = f(t − s, α − r)`.
    pub fn translate(&self, s: f64, r: i64, tail_tol: f64) -> Result<Self> {
        let c = self.params.components();
        let g = self.grid.points;
        let mut out = vec![ZERO; self.values.len()];
        for al in 0..c {
            let src = modulo(al as i64 - r, c);
            let v = shift_line(self.grid, self.component(src), s, Some(tail_tol))?;
            out[al * g..(al + 1) * g].copy_from_slice(&v);
        }
        Ok(self.with_values(out))
    }

    /// Spectral `d/dt`.
    pub fn derivative(&self, tail_tol: f64) -> Result<Self> {
        let c = self.params.components();
        let g = self.grid.points;
        let mut out = vec![ZERO; self.values.len()];
        for al in 0..c {
            let v = spectral_line(self.grid, self.component(al), Some(tail_tol), |w| I * w)?;
            out[al * g..(al + 1) * g].copy_from_slice(&v);
        }
        Ok(self.with_values(out))
    }
}

fn spectral_line(grid: HeisenbergGrid, v: &[C64], tail_tol: Option<f64>, mult: impl Fn(f64) -> C64) -> Result<Vec<C64>> {
    let g = grid.points;
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(g);
    let inv = planner.plan_fft_inverse(g);
    let mut line = v.to_vec();
    fwd.process(&mut line);
    if let Some(tol) = tail_tol {
        let peak = line.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let tail = line
            .iter()
            .enumerate()
            .filter(|(k, _)| (*k).min(g - *k) > 3 * g / 8)
            .map(|(_, z)| z.norm())
            .fold(0.0, f64::max);
        if peak > 0.0 && tail / peak > tol {
            return Err(Error::Aliasing { tail: tail / peak, tolerance: tol });
        }
    }
    for (k, z) in line.iter_mut().enumerate() {
        let m = if k == g / 2 { nyquist(mult(grid.wavenumber(k)), mult(-grid.wavenumber(k))) } else { mult(grid.wavenumber(k)) };
        *z *= m / g as f64;
    }
    inv.process(&mut line);
    Ok(line)
}

// symmetric treatment of the Nyquist bin keeps shifts unitary and derivatives skew
fn nyquist(a: C64, b: C64) -> C64 {
    0.5 * (a + b)
}

fn shift_line(grid: HeisenbergGrid, v: &[C64], s: f64, tail_tol: Option<f64>) -> Result<Vec<C64>> {
    spectral_line(grid, v, tail_tol, |w| C64::from_polar(1.0, -w * s))
}

/// Right action generators of `A_θ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RightGen {
    U1,
    U2,
}

/// Left action generators of `A_θ′`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeftGen {
    V1,
    V2,
}

/// `f·U₁^{±1}` or `f·U₂^{±1}`.
pub fn act_right(f: &HeisenbergSection, gen: RightGen, inverse: bool) -> Result<HeisenbergSection> {
    let p = f.params;
    let [_, _, c, d] = p.g;
    let sg = if inverse { -1.0 } else { 1.0 };
    match gen {
        RightGen::U1 => Ok(f.mul_fn(|t, al| C64::from_polar(1.0, sg * 2.0 * PI * (t - al as f64 * d as f64 / c as f64)))),
        RightGen::U2 => {
            let s = p.rank / c as f64;
            if inverse {
                f.translate(-s, -1, TAIL_TOL)
            } else {
                f.translate(s, 1, TAIL_TOL)
            }
        }
    }
}

/// `V₁^{±1} f` or `V₂^{±1} f`.
pub fn act_left(gen: LeftGen, f: &HeisenbergSection, inverse: bool) -> Result<HeisenbergSection> {
    let p = f.params;
    let [a, _, c, _] = p.g;
    let sg = if inverse { -1.0 } else { 1.0 };
    match gen {
        LeftGen::V1 => Ok(f.mul_fn(|t, al| C64::from_polar(1.0, sg * 2.0 * PI * (t / p.rank - al as f64 / c as f64)))),
        LeftGen::V2 => {
            let s = 1.0 / c as f64;
            if inverse {
                f.translate(-s, -a, TAIL_TOL)
            } else {
                f.translate(s, a, TAIL_TOL)
            }
        }
    }
}

/// `f · U₁^m U₂^n = e^{−2πiθmn} (f·U₂^n)·U₁^m` (translate before modulating).
pub fn act_right_monomial(f: &HeisenbergSection, m: i64, n: i64) -> Result<HeisenbergSection> {
    let mut g = f.clone();
    for _ in 0..n.unsigned_abs() {
        g = act_right(&g, RightGen::U2, n < 0)?;
    }
    for _ in 0..m.unsigned_abs() {
        g = act_right(&g, RightGen::U1, m < 0)?;
    }
    Ok(g.scale(f.params.algebra().phase(-m * n)))
}

/// `V₁^m V₂^n f`.
pub fn act_left_monomial(m: i64, n: i64, f: &HeisenbergSection) -> Result<HeisenbergSection> {
    let mut g = f.clone();
    for _ in 0..n.unsigned_abs() {
        g = act_left(LeftGen::V2, &g, n < 0)?;
    }
    for _ in 0..m.unsigned_abs() {
        g = act_left(LeftGen::V1, &g, m < 0)?;
    }
    Ok(g)
}

/// `f · a` for `a ∈ A_θ`.
pub fn act_right_element(f: &HeisenbergSection, a: &TorusElement) -> Result<HeisenbergSection> {
    let mut out = f.scale(ZERO);
    for (ix, c) in a.iter() {
        out = out.add(&act_right_monomial(f, ix.m, ix.n)?, c);
    }
    Ok(out)
}

/// `a · f` for `a ∈ A_θ′`.
pub fn act_left_element(a: &TorusElement, f: &HeisenbergSection) -> Result<HeisenbergSection> {
    let mut out = f.scale(ZERO);
    for (ix, c) in a.iter() {
        out = out.add(&act_left_monomial(ix.m, ix.n, f)?, c);
    }
    Ok(out)
}

/// Which algebra the valued inner product takes values in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InnerSide {
    /// `⟨f₁, f₂⟩_{A_θ}`, right-linear.
    ATheta,
    /// `_{A_θ′}⟨f₁, f₂⟩`, left-linear.
    AThetaPrime,
}

/// Coefficientwise reconstruction of the valued inner products:
/// `⟨f₁,f₂⟩_A = Σ c_{mn} U^{mn}` with `c_{mn} = ⟨f₁, f₂·(U^{mn})*⟩`, and
/// `_{A′}⟨f₁,f₂⟩ = Σ d_{mn} V^{mn}` with `d_{mn} = ⟨f₂, (V^{mn})* f₁⟩ / |rk|`.
pub fn valued_inner(f1: &HeisenbergSection, f2: &HeisenbergSection, side: InnerSide, cutoff: usize, tol: f64) -> Result<TorusElement> {
    let p = f1.params;
    let m = cutoff as i64;
    let alg = match side {
        InnerSide::ATheta => p.algebra(),
        InnerSide::AThetaPrime => p.left_algebra(),
    };
    let mut coeffs = Vec::new();
    let mut peak = 0.0f64;
    let mut edge = 0.0f64;
    for a in -m..=m {
        for b in -m..=m {
            // (U^{ab})* = e^{2πiθab} U^{−a,−b}; ⟨f₂, (V^{ab})* f₁⟩ = ⟨V^{ab} f₂, f₁⟩
            let c = match side {
                InnerSide::ATheta => f1.l2_inner(&act_right_monomial(f2, -a, -b)?) * alg.phase(a * b),
                InnerSide::AThetaPrime => act_left_monomial(a, b, f2)?.l2_inner(f1) / p.rank.abs(),
            };
            peak = peak.max(c.norm());
            if a.abs() == m || b.abs() == m {
                edge = edge.max(c.norm());
            }
            coeffs.push(((a, b), c));
        }
    }
    if peak > 0.0 && edge > tol * peak {
        return Err(Error::Truncation { n: cutoff, residual: edge / peak, tolerance: tol });
    }
    Ok(TorusElement::from_coeffs(alg, coeffs))
}

/// Coefficient cutoff for the valued inner products on a grid: large enough
/// for the left coefficients (which decay over `n·/c` shifts) and small enough
/// that right translations by `n·rk/c` stay inside the periodic box.
pub fn inner_cutoff(params: &HeisenbergParams, grid: &HeisenbergGrid) -> usize {
    let c = params.g[2].unsigned_abs() as f64;
    ((1.2 * grid.half_width * c / params.rank.abs()).floor() as usize).clamp(2, 14)
}

/// Both sides of `|rk| φ₀′(_{A′}⟨f₂,f₁⟩) = ⟨f₁,f₂⟩ = φ₀(⟨f₁,f₂⟩_A)`.
#[derive(Clone, Debug, Serialize)]
pub struct InnerProductReport {
    pub l2: C64,
    pub right: C64,
    pub left: C64,
    pub residual: f64,
    /// `‖_{A′}⟨f,g⟩h − f⟨g,h⟩_A‖_∞` relative to `‖f⟨g,h⟩_A‖_∞`.
    pub imprimitivity: f64,
}

pub fn inner_product_check(f1: &HeisenbergSection, f2: &HeisenbergSection, f3: &HeisenbergSection, cutoff: usize) -> Result<InnerProductReport> {
    let l2 = f1.l2_inner(f2);
    let right = valued_inner(f1, f2, InnerSide::ATheta, cutoff, 1e-6)?.trace0();
    let left = valued_inner(f2, f1, InnerSide::AThetaPrime, cutoff, 1e-6)?.trace0() * f1.params.rank.abs();
    let lhs = act_left_element(&valued_inner(f1, f2, InnerSide::AThetaPrime, cutoff, 1e-6)?, f3)?;
    let rhs = act_right_element(f1, &valued_inner(f2, f3, InnerSide::ATheta, cutoff, 1e-6)?)?;
    Ok(InnerProductReport {
        l2,
        right,
        left,
        residual: (right - l2).norm().max((left - l2).norm()),
        imprimitivity: lhs.distance(&rhs) / rhs.sup_norm().max(f64::MIN_POSITIVE),
    })
}

/// `∇₁ = d/dt`, `∇₂ = 2πiμt`.
pub fn connection(f: &HeisenbergSection, j: usize) -> Result<HeisenbergSection> {
    match j {
        1 => f.derivative(TAIL_TOL),
        2 => {
            let mu = f.params.slope;
            Ok(f.mul_fn(|t, _| I * (2.0 * PI * mu * t)))
        }
        _ => Err(Error::InvalidParams(format!("connection index {j}"))),
    }
}

/// `J(f)(x, α) = conj f((cθ+d)x, −d⁻¹α)`, a section of `ℰ(g⁻¹, θ′)`.
pub fn j_transpose(f: &HeisenbergSection) -> Result<HeisenbergSection> {
    let p = f.params;
    let [_, _, c, d] = p.g;
    let dinv = mod_inverse(d, c.abs()).ok_or_else(|| Error::InvalidParams("gcd(d, c) ≠ 1".into()))?;
    let target = p.inverse()?;
    let grid = f.grid;
    let g = grid.points;
    let nc = p.components();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(g);
    let mut spectra = Vec::with_capacity(nc);
    for al in 0..nc {
        let mut line = f.component(al).to_vec();
        fwd.process(&mut line);
        let peak = line.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let tail = line.iter().enumerate().filter(|(k, _)| (*k).min(g - *k) > 3 * g / 8).map(|(_, z)| z.norm()).fold(0.0, f64::max);
        if peak > 0.0 && tail / peak > TAIL_TOL {
            return Err(Error::Aliasing { tail: tail / peak, tolerance: TAIL_TOL });
        }
        spectra.push(line);
    }
    // band-limited interpolation at the dilated points
    let eval = |al: usize, x: f64| -> C64 {
        let sp = &spectra[al];
        let mut s = ZERO;
        for (k, z) in sp.iter().enumerate() {
            let w = grid.wavenumber(k);
            let e = if k == g / 2 { C64::new((w * (x + grid.half_width)).cos(), 0.0) } else { C64::from_polar(1.0, w * (x + grid.half_width)) };
            s += z * e;
        }
        s / g as f64
    };
    let out = HeisenbergSection::from_fn(target, grid, |x, al| {
        let y = p.rank * x;
        if y.abs() >= grid.half_width {
            return ZERO;
        }
        let src = modulo(-dinv * al as i64, nc);
        eval(src, y).conj()
    });
    Ok(out)
}

/// Dense operators of the discretized module.
#[derive(Clone, Debug)]
pub struct ModuleOperators {
    pub params: HeisenbergParams,
    pub grid: HeisenbergGrid,
    /// Left generators `V₁`, `V₂`.
    pub v1: Mat<C64>,
    pub v2: Mat<C64>,
    /// `∂ = ∇₁ + τ̄∇₂`.
    pub dbar: Mat<C64>,
}

impl ModuleOperators {
    pub fn new(params: HeisenbergParams, grid: HeisenbergGrid) -> Result<Self> {
        let g = grid.points;
        let nc = params.components();
        let n = g * nc;
        let [a, _, c, _] = params.g;
        let mut shift = Mat::<C64>::zeros(g, g);
        let mut deriv = Mat::<C64>::zeros(g, g);
        for j in 0..g {
            let mut e = vec![ZERO; g];
            e[j] = ONE;
            let s = shift_line(grid, &e, 1.0 / c as f64, None)?;
            let d = spectral_line(grid, &e, None, |w| I * w)?;
            for i in 0..g {
                shift[(i, j)] = s[i];
                deriv[(i, j)] = d[i];
            }
        }
        let mut v1 = Mat::<C64>::zeros(n, n);
        let mut v2 = Mat::<C64>::zeros(n, n);
        let mut dbar = Mat::<C64>::zeros(n, n);
        let tb = params.tau.conj();
        for al in 0..nc {
            let src = modulo(al as i64 - a, nc);
            for i in 0..g {
                let t = grid.t(i);
                v1[(al * g + i, al * g + i)] = C64::from_polar(1.0, 2.0 * PI * (t / params.rank - al as f64 / c as f64));
                dbar[(al * g + i, al * g + i)] += tb * I * (2.0 * PI * params.slope * t);
                for j in 0..g {
                    v2[(al * g + i, src * g + j)] = shift[(i, j)];
                    dbar[(al * g + i, al * g + j)] += deriv[(i, j)];
                }
            }
        }
        Ok(Self { params, grid, v1, v2, dbar })
    }

    pub fn dim(&self) -> usize {
        self.v1.nrows()
    }

    fn power(m: &Mat<C64>, k: i64) -> Mat<C64> {
        let base = if k < 0 { m.adjoint().to_owned() } else { m.clone() };
        let mut out = Mat::<C64>::identity(m.nrows(), m.ncols());
        for _ in 0..k.unsigned_abs() {
            out = &out * &base;
        }
        out
    }

    /// Left action matrix of `a ∈ A_θ′`: `Σ a_{mn} V₁^m V₂^n`.
    pub fn left_matrix(&self, a: &TorusElement) -> Mat<C64> {
        let n = self.dim();
        let mut out = Mat::<C64>::zeros(n, n);
        for (ix, c) in a.iter() {
            let m = &Self::power(&self.v1, ix.m) * &Self::power(&self.v2, ix.n);
            out += m * faer::Scale(c);
        }
        out
    }
}

/// Which of `∂*∂` and `∂∂*` carries the kernel: the ordering whose flat
/// spectrum is `4π|μ|Im τ · {0, 1, 2, …}`.
pub fn kernel_ordering_star_first(params: &HeisenbergParams) -> bool {
    params.slope > 0.0
}

fn hermitian_part(m: &Mat<C64>) -> Mat<C64> {
    let n = m.nrows();
    Mat::<C64>::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)].conj()))
}

/// Module Laplacian `rk² k L k` with `L ∈ {∂*∂, ∂∂*}` the kernel-carrying
/// ordering, `k = e^{h/2}` acting from the left (`k = 1` without a dilaton).
pub fn oscillator_laplacian(ops: &ModuleOperators, h: Option<&TorusElement>) -> Result<Mat<C64>> {
    let d = &ops.dbar;
    let flat = if kernel_ordering_star_first(&ops.params) { d.adjoint() * d } else { d * d.adjoint() };
    let rk2 = ops.params.rank * ops.params.rank;
    let lap = match h {
        None => flat * faer::Scale(C64::new(rk2, 0.0)),
        Some(h) => {
            h.require_self_adjoint()?;
            let hm = hermitian_part(&ops.left_matrix(h));
            let k = Spectral::of_mat(&hm)?.matrix_fn(|x| C64::new((0.5 * x).exp(), 0.0));
            (&k * &flat * &k) * faer::Scale(C64::new(rk2, 0.0))
        }
    };
    Ok(hermitian_part(&lap))
}

/// Flat ladder spacing `rk² · 4π|μ| Im τ`.
pub fn ladder_spacing(params: &HeisenbergParams) -> f64 {
    params.rank * params.rank * 4.0 * PI * params.slope.abs() * params.tau.im
}

/// Exact flat heat trace `|c| / (1 − e^{−tω})`.
pub fn flat_heat_trace(params: &HeisenbergParams, t: f64) -> f64 {
    params.components() as f64 / (1.0 - (-t * ladder_spacing(params)).exp())
}

/// Heat traces `Tr(a e^{−tΔ})` on the module.
pub struct ModuleHeat {
    pub spectral: Spectral,
}

impl ModuleHeat {
    pub fn new(lap: &Mat<C64>) -> Result<Self> {
        let spectral = Spectral::of_mat(lap)?;
        let scale = spectral.values.last().copied().unwrap_or(1.0).abs().max(1.0);
        if spectral.values[0] < -1e-9 * scale {
            return Err(Error::NonPositive(format!("module Laplacian eigenvalue {:.3e}", spectral.values[0])));
        }
        Ok(Self { spectral })
    }

    /// Diagonal of `Vᴴ A V`.
    pub fn probe_weights(&self, a: &Mat<C64>) -> Vec<f64> {
        let v = &self.spectral.vectors;
        let av = a * v;
        (0..v.ncols()).map(|k| (0..v.nrows()).map(|i| v[(i, k)].conj() * av[(i, k)]).sum::<C64>().re).collect()
    }

    pub fn trace(&self, w: &[f64], t: f64) -> f64 {
        w.iter().zip(&self.spectral.values).map(|(w, l)| w * (-t * l.max(0.0)).exp()).sum()
    }
}

/// Heat-fit windows for the module.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModuleFitConfig {
    /// Window for the flat `a = 1` check.
    pub flat: HeatFitConfig,
    /// Short window for probes, where `e^{−c/t}` terms are negligible.
    pub probe: HeatFitConfig,
}

impl Default for ModuleFitConfig {
    fn default() -> Self {
        Self {
            flat: HeatFitConfig { t_min: 0.02, t_max: 0.12, points: 24, orders: vec![-1, 0, 1, 2, 3], window_factor: 0.0 },
            probe: HeatFitConfig { t_min: 0.012, t_max: 0.06, points: 24, orders: vec![-1, 0, 1, 2], window_factor: 0.0 },
        }
    }
}

/// Flat-module heat check against the closed-form ladder trace.
#[derive(Clone, Debug, Serialize)]
pub struct FlatHeatReport {
    pub spacing: f64,
    pub fitted_a2: f64,
    pub exact_a2: f64,
    pub fitted_a0: f64,
    pub exact_a0: f64,
    /// Largest relative deviation of the discrete trace from `|c|/(1−e^{−tω})` on the window.
    pub trace_deviation: f64,
}

pub fn flat_heat_check(ops: &ModuleOperators, cfg: &ModuleFitConfig) -> Result<FlatHeatReport> {
    let heat = ModuleHeat::new(&oscillator_laplacian(ops, None)?)?;
    let w = vec![1.0; heat.spectral.dim()];
    let p = ops.params;
    let fit = fit_trace_curve(|t| heat.trace(&w, t), &cfg.flat)?;
    let trace_deviation = cfg.flat.grid().iter().map(|&t| (heat.trace(&w, t) / flat_heat_trace(&p, t) - 1.0).abs()).fold(0.0, f64::max);
    let om = ladder_spacing(&p);
    Ok(FlatHeatReport {
        spacing: om,
        fitted_a2: fit.a2,
        exact_a2: p.components() as f64 / 2.0,
        fitted_a0: fit.a0,
        exact_a0: p.components() as f64 / om,
        trace_deviation,
    })
}

/// Lowest `count` eigenvalues of the flat module Laplacian.
pub fn flat_spectrum(ops: &ModuleOperators, count: usize) -> Result<Vec<f64>> {
    let sp = Spectral::of_mat(&oscillator_laplacian(ops, None)?)?;
    Ok(sp.values.into_iter().take(count).collect())
}

/// One probe of the Morita check.
#[derive(Clone, Debug, Serialize)]
pub struct MoritaProbe {
    pub probe: String,
    pub fitted_a2: f64,
    pub predicted_a2: f64,
    pub relative_deviation: f64,
    pub fit: HeatFit,
}

#[derive(Clone, Debug, Serialize)]
pub struct MoritaReport {
    /// The module `ℰ′ = ℰ(g⁻¹, θ′)` carrying the left `A_θ`-action.
    pub module: HeisenbergParams,
    pub grid: HeisenbergGrid,
    /// `|cθ + d|`, the trace normalization of `End(ℰ′) = A_θ`.
    pub trace_factor: f64,
    /// Slope entering the density, `−c/(cθ + d)`.
    pub density_slope: f64,
    pub probes: Vec<MoritaProbe>,
    pub max_relative_deviation: f64,
}

/// Fits `a₂(a, △_{ℰ′,k})` on the discretized `ℰ′ = ℰ(g⁻¹, θ′)` and compares
/// with `lm_a2_factor · |cθ+d| · φ₀(a·D)`, `D` the density at slope
/// `−c/(cθ+d)`.
pub fn morita_curvature_check(
    h: &TorusElement,
    params: &HeisenbergParams,
    grid: HeisenbergGrid,
    probes: &[(String, TorusElement)],
    cfg: &ModuleFitConfig,
    conv: &Conventions,
    trunc: GnsTruncation,
) -> Result<MoritaReport> {
    if h.support_radius() > 2 {
        return Err(Error::Unsupported("Morita check expects a dilaton of support radius ≤ 2".into()));
    }
    let module = params.inverse()?;
    let ops = ModuleOperators::new(module, grid)?;
    let heat = ModuleHeat::new(&oscillator_laplacian(&ops, Some(h))?)?;
    let trace_factor = params.rank.abs();
    let density_slope = -params.slope;
    let density = heisenberg_curvature_density(h, density_slope, trunc)?.density;
    let mut out = Vec::new();
    let mut worst = 0.0f64;
    for (name, a) in probes {
        let w = heat.probe_weights(&ops.left_matrix(a));
        let fit = fit_trace_curve(|t| heat.trace(&w, t), &cfg.probe)?;
        let predicted = conv.lm_a2_factor * trace_factor * a.multiply(&density)?.trace0().re;
        let rel = (fit.a2 - predicted).abs() / predicted.abs().max(1e-12);
        worst = worst.max(rel);
        out.push(MoritaProbe { probe: name.clone(), fitted_a2: fit.a2, predicted_a2: predicted, relative_deviation: rel, fit });
    }
    Ok(MoritaReport { module, grid, trace_factor, density_slope, probes: out, max_relative_deviation: worst })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(g: [i64; 4]) -> HeisenbergParams {
        let p = AlgebraParams::standard();
        HeisenbergParams::new(g, p.theta, p.tau).unwrap()
    }

    fn grid() -> HeisenbergGrid {
        HeisenbergGrid::new(12.0, 256).unwrap()
    }

    fn sample(p: HeisenbergParams) -> HeisenbergSection {
        HeisenbergSection::from_fn(p, grid(), |t, al| C64::new(1.0 + 0.3 * al as f64, 0.2 * t) * (-0.8 * (t - 0.3 * al as f64).powi(2)).exp())
    }

    #[test]
    fn params_and_errors() {
        let p = hp([1, 0, 1, 1]);
        assert!((p.rank - (p.theta + 1.0)).abs() < 1e-15);
        assert!((p.theta_prime - p.theta / (p.theta + 1.0)).abs() < 1e-15);
        assert!(matches!(HeisenbergParams::new([1, 0, 0, 1], 0.3, C64::new(0.0, 1.0)), Err(Error::TrivialBimodule)));
        assert!(matches!(HeisenbergParams::new([1, 1, 1, 1], 0.3, C64::new(0.0, 1.0)), Err(Error::InvalidParams(_))));
        let q = p.inverse().unwrap();
        assert!((q.rank * p.rank - 1.0).abs() < 1e-14);
        assert!((q.theta_prime - p.theta).abs() < 1e-14);
        assert_eq!(mod_inverse(3, 7), Some(5));
    }

    #[test]
    fn right_and_left_relations() {
        for g in [[1, 0, 1, 1], [1, 0, 2, 1]] {
            let p = hp(g);
            let f = sample(p);
            let a = act_right(&act_right(&f, RightGen::U2, false).unwrap(), RightGen::U1, false).unwrap();
            let b = act_right(&act_right(&f, RightGen::U1, false).unwrap(), RightGen::U2, false).unwrap();
            assert!(a.distance(&b.scale(p.algebra().phase(1))) < 1e-8);
            let a = act_left(LeftGen::V2, &act_left(LeftGen::V1, &f, false).unwrap(), false).unwrap();
            let b = act_left(LeftGen::V1, &act_left(LeftGen::V2, &f, false).unwrap(), false).unwrap();
            assert!(a.distance(&b.scale(p.left_algebra().phase(1))) < 1e-8);
            for gen in [LeftGen::V1, LeftGen::V2] {
                for rg in [RightGen::U1, RightGen::U2] {
                    let x = act_right(&act_left(gen, &f, false).unwrap(), rg, false).unwrap();
                    let y = act_left(gen, &act_right(&f, rg, false).unwrap(), false).unwrap();
                    assert!(x.distance(&y) < 1e-8);
                }
            }
            let back = act_right(&act_right(&f, RightGen::U2, false).unwrap(), RightGen::U2, true).unwrap();
            assert!(back.distance(&f) < 1e-10);
        }
    }

    #[test]
    fn inner_products() {
        let p = hp([1, 0, 2, 1]);
        let gr = HeisenbergGrid::new(12.0, 512).unwrap();
        let f = HeisenbergSection::from_fn(p, gr, |t, al| C64::new(1.0 + 0.3 * al as f64, 0.2 * t) * (-0.8 * (t - 0.3 * al as f64).powi(2)).exp());
        let g = HeisenbergSection::gaussian(p, gr, 0.7, -0.4, 1);
        let h = HeisenbergSection::gaussian(p, gr, 0.5, 0.3, 0).scale(C64::new(0.0, 1.0));
        let r = inner_product_check(&f, &g, &h, 14).unwrap();
        assert!(r.residual < 1e-7);
        assert!(r.imprimitivity < 1e-7, "{}", r.imprimitivity);
        let gg = HeisenbergSection::gaussian(p, gr, 1.3, 0.0, 0);
        assert!((gg.l2_inner(&gg).re - (1.0 / 2.6f64).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn connection_curvature_and_compatibility() {
        let p = hp([1, 0, 1, 1]);
        let f = sample(p);
        let c12 = connection(&connection(&f, 2).unwrap(), 1).unwrap().add(&connection(&connection(&f, 1).unwrap(), 2).unwrap(), C64::new(-1.0, 0.0));
        assert!(c12.distance(&f.scale(I * (2.0 * PI * p.slope))) < 1e-8);
        let g = HeisenbergSection::gaussian(p, grid(), 0.5, 0.2, 0);
        for j in [1, 2] {
            let s = connection(&f, j).unwrap().l2_inner(&g) + f.l2_inner(&connection(&g, j).unwrap());
            assert!(s.norm() < 1e-10);
        }
    }

    #[test]
    fn j_transpose_properties() {
        let p = hp([1, 0, 2, 1]);
        let f = sample(p);
        let jf = j_transpose(&f).unwrap();
        let jjf = j_transpose(&jf).unwrap();
        assert!(jjf.distance(&f) < 1e-7, "{}", jjf.distance(&f));
        for (rg, lg) in [(RightGen::U1, LeftGen::V1), (RightGen::U2, LeftGen::V2)] {
            let x = j_transpose(&act_right(&f, rg, false).unwrap()).unwrap();
            let y = act_left(lg, &jf, true).unwrap();
            assert!(x.distance(&y) < 1e-7, "{}", x.distance(&y));
        }
        let g = HeisenbergSection::gaussian(p, grid(), 1.0, 0.0, 0);
        let jg = j_transpose(&g).unwrap();
        let want = HeisenbergSection::gaussian(p.inverse().unwrap(), grid(), p.rank * p.rank, 0.0, 0);
        assert!(jg.distance(&want) < 1e-10);
    }

    #[test]
    fn aliasing_detected() {
        let p = hp([1, 0, 1, 1]);
        let f = HeisenbergSection::gaussian(p, HeisenbergGrid::new(12.0, 32).unwrap(), 4.0, 0.0, 0);
        assert!(matches!(act_right(&f, RightGen::U2, false), Err(Error::Aliasing { .. })));
    }

    #[test]
    fn flat_ladder() {
        let p = hp([1, 0, 1, 1]);
        let ops = ModuleOperators::new(p, grid()).unwrap();
        let ev = flat_spectrum(&ops, 10).unwrap();
        let om = ladder_spacing(&p);
        for (n, e) in ev.iter().enumerate() {
            assert!((e - om * n as f64).abs() < 1e-6 * om, "{n}: {e}");
        }
    }
}
