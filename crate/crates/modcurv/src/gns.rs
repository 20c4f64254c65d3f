//! Truncated GNS representation `L²(A_θ, φ₀)`, Laplacians, heat traces and
//! the extraction of heat coefficients.
//!
//! The basis is `U₁^m U₂^n` with `|m|, |n| ≤ N`, enumerated row-major in `m`.

use std::f64::consts::PI;

use faer::linalg::solvers::SolveLstsq;
use faer::{Mat, Side};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nctorus::{AlgebraParams, TorusElement};
use crate::quad::gauss_legendre;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

/// Fourier box `|m|, |n| ≤ N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct GnsTruncation {
    n: usize,
}

impl GnsTruncation {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParams("truncation N must be positive".into()));
        }
        Ok(Self { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn side(&self) -> usize {
        2 * self.n + 1
    }

    pub fn dim(&self) -> usize {
        self.side() * self.side()
    }

    pub fn contains(&self, m: i64, n: i64) -> bool {
        let b = self.n as i64;
        m.abs() <= b && n.abs() <= b
    }

    pub fn index(&self, m: i64, n: i64) -> Option<usize> {
        if !self.contains(m, n) {
            return None;
        }
        let b = self.n as i64;
        Some(((m + b) as usize) * self.side() + (n + b) as usize)
    }

    pub fn mode(&self, i: usize) -> (i64, i64) {
        let b = self.n as i64;
        ((i / self.side()) as i64 - b, (i % self.side()) as i64 - b)
    }

    /// Index of the cyclic vector `1`.
    pub fn origin(&self) -> usize {
        self.dim() / 2
    }

    pub fn modes(&self) -> impl Iterator<Item = (i64, i64)> + '_ {
        (0..self.dim()).map(|i| self.mode(i))
    }

    /// Smallest flat eigenvalue `|m + τn|²` on the first ring outside the box.
    pub fn edge_eigenvalue(&self, params: &AlgebraParams) -> f64 {
        let r = self.n as i64 + 1;
        let mut best = f64::INFINITY;
        for k in -r..=r {
            for (m, n) in [(r, k), (-r, k), (k, r), (k, -r)] {
                best = best.min(params.laplace_multiplier(m, n));
            }
        }
        best
    }

    /// Coefficient vector of `a`; errors if the support leaves the box.
    pub fn element_to_vector(&self, a: &TorusElement) -> Result<Vec<C64>> {
        let mut v = vec![ZERO; self.dim()];
        for (ix, c) in a.iter() {
            let i = self.index(ix.m, ix.n).ok_or(Error::Truncation {
                n: self.n,
                residual: c.norm(),
                tolerance: 0.0,
            })?;
            v[i] = c;
        }
        Ok(v)
    }

    pub fn vector_to_element(&self, params: AlgebraParams, v: &[C64]) -> TorusElement {
        TorusElement::from_coeffs(params, v.iter().enumerate().map(|(i, &c)| (self.mode(i), c)))
    }

    /// Largest coefficient on the outer ring `max(|m|,|n|) = N`.
    pub fn ring_mass(&self, v: &[C64]) -> f64 {
        let b = self.n as i64;
        v.iter()
            .enumerate()
            .filter(|(i, _)| {
                let (m, n) = self.mode(*i);
                m.abs() == b || n.abs() == b
            })
            .fold(0.0f64, |acc, (_, c)| acc.max(c.norm()))
    }
}

/// Sparse left multiplication by a finitely supported element, compressed to the box.
#[derive(Clone, Debug)]
pub struct LeftMul {
    trunc: GnsTruncation,
    // (p, q, c, phase table e^{2πiθ q m} indexed by m + N)
    terms: Vec<(i64, i64, C64, Vec<C64>)>,
}

impl LeftMul {
    pub fn new(a: &TorusElement, trunc: GnsTruncation) -> Self {
        let p = a.params();
        let b = trunc.n() as i64;
        let terms = a
            .iter()
            .map(|(ix, c)| {
                let phases = (-b..=b).map(|m| p.phase(ix.n * m)).collect();
                (ix.m, ix.n, c, phases)
            })
            .collect();
        Self { trunc, terms }
    }

    pub fn apply(&self, v: &[C64]) -> Vec<C64> {
        let mut out = vec![ZERO; v.len()];
        self.apply_add(v, ONE, &mut out);
        out
    }

    /// `out += s · (a v)`.
    pub fn apply_add(&self, v: &[C64], s: C64, out: &mut [C64]) {
        let b = self.trunc.n() as i64;
        let side = self.trunc.side() as i64;
        for (p, q, c, phases) in &self.terms {
            let (p, q) = (*p, *q);
            let m_lo = (-b).max(-b - p);
            let m_hi = b.min(b - p);
            let n_lo = (-b).max(-b - q);
            let n_hi = b.min(b - q);
            if m_lo > m_hi || n_lo > n_hi {
                continue;
            }
            for m in m_lo..=m_hi {
                let f = s * c * phases[(m + b) as usize];
                let src = (m + b) * side;
                let dst = (m + p + b) * side;
                for n in n_lo..=n_hi {
                    out[(dst + n + q + b) as usize] += f * v[(src + n + b) as usize];
                }
            }
        }
    }

    /// Number of (term, column) pairs whose product leaves the box.
    pub fn leakage(&self) -> usize {
        let side = self.trunc.side() as i64;
        self.terms
            .iter()
            .map(|(p, q, _, _)| {
                let inside = (side - p.abs()).max(0) * (side - q.abs()).max(0);
                (side * side - inside) as usize
            })
            .sum()
    }
}

/// Dense operator on the truncated GNS space.
#[derive(Clone, Debug)]
pub struct GnsMatrix {
    pub trunc: GnsTruncation,
    pub params: AlgebraParams,
    pub data: Mat<C64>,
    /// Columns truncated by the box (left multiplications only).
    pub leakage: usize,
    /// Lower bound for the spectrum missing from the box, when known.
    pub edge_eigenvalue: Option<f64>,
}

impl GnsMatrix {
    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn identity(params: AlgebraParams, trunc: GnsTruncation) -> Self {
        Self { trunc, params, data: Mat::identity(trunc.dim(), trunc.dim()), leakage: 0, edge_eigenvalue: None }
    }

    pub fn apply(&self, v: &[C64]) -> Vec<C64> {
        let d = self.dim();
        (0..d).map(|i| (0..d).map(|j| self.data[(i, j)] * v[j]).sum()).collect()
    }

    pub fn entry(&self, i: usize, j: usize) -> C64 {
        self.data[(i, j)]
    }

    /// Matrix product; `edge_eigenvalue` is dropped.
    pub fn matmul(&self, other: &Self) -> Self {
        Self { trunc: self.trunc, params: self.params, data: &self.data * &other.data, leakage: self.leakage + other.leakage, edge_eigenvalue: None }
    }

    /// `max |M - M^H|`.
    pub fn hermitian_residual(&self) -> f64 {
        let d = self.dim();
        let mut r = 0.0f64;
        for i in 0..d {
            for j in 0..=i {
                r = r.max((self.data[(i, j)] - self.data[(j, i)].conj()).norm());
            }
        }
        r
    }

    pub fn column(&self, j: usize) -> Vec<C64> {
        (0..self.dim()).map(|i| self.data[(i, j)]).collect()
    }
}

/// Matrix of left multiplication by `a` on the box. Columns whose image
/// leaves the box are truncated and counted in `leakage`.
pub fn represent(a: &TorusElement, trunc: GnsTruncation) -> GnsMatrix {
    let lm = LeftMul::new(a, trunc);
    let d = trunc.dim();
    let mut data = Mat::<C64>::zeros(d, d);
    let mut e = vec![ZERO; d];
    for j in 0..d {
        e[j] = ONE;
        let col = lm.apply(&e);
        e[j] = ZERO;
        for (i, c) in col.into_iter().enumerate() {
            if c != ZERO {
                data[(i, j)] = c;
            }
        }
    }
    GnsMatrix { trunc, params: *a.params(), data, leakage: lm.leakage(), edge_eigenvalue: None }
}

/// Cyclic-vector readout of a matrix.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub element: TorusElement,
    /// `max |M - represent(element)|` over the interior block.
    pub residual: f64,
}

pub fn reconstruct(m: &GnsMatrix) -> Reconstruction {
    let t = m.trunc;
    let element = t.vector_to_element(m.params, &m.column(t.origin()));
    let r = element.support_radius().min(t.n());
    let back = represent(&element, t);
    let inner = (t.n() - r) as i64;
    let mut residual = 0.0f64;
    for j in 0..t.dim() {
        let (mj, nj) = t.mode(j);
        if mj.abs() > inner || nj.abs() > inner {
            continue;
        }
        for i in 0..t.dim() {
            residual = residual.max((m.data[(i, j)] - back.data[(i, j)]).norm());
        }
    }
    Reconstruction { element, residual }
}

/// Eigendecomposition of a Hermitian matrix, ascending eigenvalues.
#[derive(Clone, Debug)]
pub struct Spectral {
    pub values: Vec<f64>,
    pub vectors: Mat<C64>,
}

impl Spectral {
    pub fn of(m: &GnsMatrix) -> Result<Self> {
        Self::of_mat(&m.data)
    }

    pub fn of_mat(m: &Mat<C64>) -> Result<Self> {
        let evd = m
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::Unsupported(format!("eigensolver failed: {e:?}")))?;
        let values = evd.S().column_vector().iter().map(|x| x.re).collect();
        Ok(Self { values, vectors: evd.U().to_owned() })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `Vᴴ v`.
    pub fn to_eigenbasis(&self, v: &[C64]) -> Vec<C64> {
        let d = self.dim();
        (0..d).map(|k| (0..d).map(|i| self.vectors[(i, k)].conj() * v[i]).sum()).collect()
    }

    /// `V w`.
    pub fn from_eigenbasis(&self, w: &[C64]) -> Vec<C64> {
        let d = self.dim();
        let mut out = vec![ZERO; d];
        for k in 0..d {
            if w[k] == ZERO {
                continue;
            }
            for i in 0..d {
                out[i] += self.vectors[(i, k)] * w[k];
            }
        }
        out
    }

    /// `f(M) v`.
    pub fn apply_fn(&self, f: impl Fn(f64) -> C64, v: &[C64]) -> Vec<C64> {
        let w: Vec<C64> = self.to_eigenbasis(v).into_iter().zip(&self.values).map(|(c, &x)| c * f(x)).collect();
        self.from_eigenbasis(&w)
    }

    /// Dense `f(M) = V f(D) Vᴴ`.
    pub fn matrix_fn(&self, f: impl Fn(f64) -> C64) -> Mat<C64> {
        let d = self.dim();
        let scaled = Mat::<C64>::from_fn(d, d, |i, k| self.vectors[(i, k)] * f(self.values[k]));
        &scaled * self.vectors.adjoint()
    }
}

/// The Laplacians of the truncated GNS space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LaplacianKind {
    /// Diagonal `|m + τn|²`.
    Flat,
    /// `k △ k` with `k = e^{h/2}`.
    Conformal,
    /// `δ_τ* k² δ_τ` on (0,1)-forms.
    Forms01,
    /// `e^{sh/2} △ e^{sh/2}`.
    FamilyS(f64),
}

/// Lower bound of `h` from its Fourier data.
fn dilaton_floor(h: &TorusElement) -> f64 {
    let h00 = h.coeff(0, 0).re;
    h00 - (h.l1_norm() - h.coeff(0, 0).norm())
}

fn flat_diag(params: &AlgebraParams, trunc: GnsTruncation) -> Vec<f64> {
    trunc.modes().map(|(m, n)| params.laplace_multiplier(m, n)).collect()
}

pub fn laplacian(kind: LaplacianKind, h: &TorusElement, trunc: GnsTruncation) -> Result<GnsMatrix> {
    h.require_self_adjoint()?;
    let params = *h.params();
    let d = trunc.dim();
    let diag = flat_diag(&params, trunc);
    let edge = trunc.edge_eigenvalue(&params);
    let floor = dilaton_floor(h);
    let (data, edge) = match kind {
        LaplacianKind::Flat => (Mat::from_fn(d, d, |i, j| if i == j { C64::new(diag[i], 0.0) } else { ZERO }), edge),
        LaplacianKind::Conformal | LaplacianKind::FamilyS(_) => {
            let s = if let LaplacianKind::FamilyS(s) = kind { s } else { 1.0 };
            let sp = Spectral::of(&represent(h, trunc))?;
            let k = sp.matrix_fn(|x| C64::new((0.5 * s * x).exp(), 0.0));
            let kd = Mat::<C64>::from_fn(d, d, |i, j| k[(i, j)] * diag[j]);
            let mut data = &kd * &k;
            symmetrize(&mut data);
            (data, edge * (s * floor).min(s * (h.coeff(0, 0).re + h.l1_norm())).exp())
        }
        LaplacianKind::Forms01 => {
            let sp = Spectral::of(&represent(h, trunc))?;
            let k2 = sp.matrix_fn(|x| C64::new(x.exp(), 0.0));
            let tb = params.tau.conj();
            let a: Vec<C64> = trunc.modes().map(|(m, n)| m as f64 + tb * n as f64).collect();
            let mut data = Mat::<C64>::from_fn(d, d, |i, j| a[i].conj() * k2[(i, j)] * a[j]);
            symmetrize(&mut data);
            (data, edge * floor.exp())
        }
    };
    Ok(GnsMatrix { trunc, params, data, leakage: 0, edge_eigenvalue: Some(edge) })
}

fn symmetrize(m: &mut Mat<C64>) {
    let d = m.nrows();
    for i in 0..d {
        m[(i, i)] = C64::new(m[(i, i)].re, 0.0);
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)].conj());
            m[(i, j)] = v;
            m[(j, i)] = v.conj();
        }
    }
}

/// Spectral data of a Laplacian, reused across `t` and probes.
#[derive(Clone, Debug)]
pub struct HeatTrace {
    pub trunc: GnsTruncation,
    pub params: AlgebraParams,
    pub spectral: Spectral,
    pub edge_eigenvalue: Option<f64>,
}

impl HeatTrace {
    pub fn new(l: &GnsMatrix) -> Result<Self> {
        let herm = l.hermitian_residual();
        let spectral = Spectral::of(l)?;
        let top = spectral.values.last().copied().unwrap_or(0.0).abs().max(1.0);
        if herm > 1e-9 * top {
            return Err(Error::NonPositive(format!("Laplacian not Hermitian (residual {herm:.3e})")));
        }
        let low = spectral.values[0];
        if low < -1e-10 * top {
            return Err(Error::NonPositive(format!("lowest eigenvalue {low:.3e}")));
        }
        Ok(Self { trunc: l.trunc, params: l.params, spectral, edge_eigenvalue: l.edge_eigenvalue })
    }

    pub fn lambda_max(&self) -> f64 {
        self.spectral.values.last().copied().unwrap_or(0.0)
    }

    /// Diagonal `⟨v_k, a v_k⟩` of `a` in the eigenbasis.
    pub fn probe_weights(&self, a: &TorusElement) -> Vec<C64> {
        let lm = LeftMul::new(a, self.trunc);
        let d = self.spectral.dim();
        let mut col = vec![ZERO; d];
        (0..d)
            .map(|k| {
                for i in 0..d {
                    col[i] = self.spectral.vectors[(i, k)];
                }
                let img = lm.apply(&col);
                (0..d).map(|i| col[i].conj() * img[i]).sum()
            })
            .collect()
    }

    pub fn trace_weighted(&self, weights: &[C64], t: f64) -> C64 {
        weights.iter().zip(&self.spectral.values).map(|(w, &l)| w * (-t * l.max(0.0)).exp()).sum()
    }

    /// `Tr(a e^{-tL})`.
    pub fn trace(&self, a: &TorusElement, t: f64) -> Result<f64> {
        if !(t > 0.0) {
            return Err(Error::InvalidParams(format!("heat time t = {t} must be positive")));
        }
        Ok(self.trace_weighted(&self.probe_weights(a), t).re)
    }

    /// Eigenvectors with eigenvalue below `tol · λ_max`.
    pub fn kernel_dimension(&self, tol: f64) -> usize {
        let top = self.lambda_max().max(1.0);
        self.spectral.values.iter().filter(|&&l| l < tol * top).count()
    }
}

/// `Tr(a e^{-tL})` for a single `(L, a, t)`.
pub fn heat_trace(l: &GnsMatrix, a: &TorusElement, t: f64) -> Result<f64> {
    HeatTrace::new(l)?.trace(a, t)
}

/// Fit configuration for the small-`t` expansion.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeatFitConfig {
    pub t_min: f64,
    pub t_max: f64,
    pub points: usize,
    pub orders: Vec<i32>,
    /// `t_min ≥ window_factor / λ_edge`.
    pub window_factor: f64,
}

impl Default for HeatFitConfig {
    fn default() -> Self {
        Self { t_min: 0.15, t_max: 0.5, points: 24, orders: vec![-1, 0, 1, 2], window_factor: 50.0 }
    }
}

impl HeatFitConfig {
    /// Smallest admissible `t_min` for this spectrum.
    pub fn safe_t_min(&self, heat: &HeatTrace) -> f64 {
        match heat.edge_eigenvalue {
            Some(e) => self.window_factor / e,
            None => 40.0 / heat.lambda_max(),
        }
    }

    /// Same grid with `t_min` raised to the safe bound.
    pub fn for_heat(&self, heat: &HeatTrace) -> Self {
        let mut c = self.clone();
        c.t_min = c.t_min.max(self.safe_t_min(heat));
        c
    }

    pub fn grid(&self) -> Vec<f64> {
        let p = self.points.max(2);
        let r = (self.t_max / self.t_min).ln() / (p - 1) as f64;
        (0..p).map(|i| self.t_min * (r * i as f64).exp()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_max > self.t_min) || self.points < self.orders.len() + 1 {
            return Err(Error::Config(format!(
                "bad t grid {}:{}:{} for {} fit terms",
                self.t_min,
                self.t_max,
                self.points,
                self.orders.len()
            )));
        }
        Ok(())
    }
}

/// Fitted heat coefficients.
#[derive(Clone, Debug, Serialize)]
pub struct HeatFit {
    pub a0: f64,
    pub a2: f64,
    pub a4: f64,
    pub coeffs: Vec<(i32, f64)>,
    /// RMS residual relative to the largest trace value.
    pub residual: f64,
    pub cond: f64,
    /// Change of `a2` when the window moves by one grid step.
    pub window_shift: f64,
    /// `|c₂| t_max² / |c₀|`.
    pub t2_ratio: f64,
    pub t: Vec<f64>,
    pub trace: Vec<f64>,
}

fn lstsq(t: &[f64], y: &[f64], orders: &[i32]) -> Result<(Vec<f64>, f64, f64)> {
    let rows = t.len();
    let cols = orders.len();
    let mut a = Mat::<f64>::from_fn(rows, cols, |i, j| t[i].powi(orders[j]));
    let mut scale = vec![0.0; cols];
    for j in 0..cols {
        scale[j] = (0..rows).map(|i| a[(i, j)] * a[(i, j)]).sum::<f64>().sqrt();
        for i in 0..rows {
            a[(i, j)] /= scale[j];
        }
    }
    let sv = a.singular_values().map_err(|e| Error::Unsupported(format!("svd failed: {e:?}")))?;
    let cond = sv[0] / sv[sv.len() - 1];
    if !(cond <= 1e8) {
        return Err(Error::IllConditioned { cond });
    }
    let b = Mat::<f64>::from_fn(rows, 1, |i, _| y[i]);
    let x = a.qr().solve_lstsq(&b);
    let c: Vec<f64> = (0..cols).map(|j| x[(j, 0)] / scale[j]).collect();
    let ymax = y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let rms = (t.iter().zip(y).map(|(&ti, &yi)| {
        let model: f64 = orders.iter().zip(&c).map(|(&o, &cj)| cj * ti.powi(o)).sum();
        (model - yi).powi(2)
    }).sum::<f64>() / rows as f64)
        .sqrt();
    Ok((c, rms / ymax, cond))
}

fn coeff_of(orders: &[i32], c: &[f64], o: i32) -> f64 {
    orders.iter().position(|&x| x == o).map(|i| c[i]).unwrap_or(0.0)
}

/// Least-squares fit of `Tr(a e^{-tL}) ≈ Σ c_q t^q` over the grid.
pub fn fit_heat_coefficients(heat: &HeatTrace, a: &TorusElement, cfg: &HeatFitConfig) -> Result<HeatFit> {
    cfg.validate()?;
    let bound = cfg.safe_t_min(heat);
    if cfg.t_min < bound * (1.0 - 1e-12) {
        return Err(Error::WindowViolated { t_min: cfg.t_min, bound });
    }
    let w = heat.probe_weights(a);
    fit_trace_curve(|ti| heat.trace_weighted(&w, ti).re, cfg)
}

/// Least-squares fit of `Σ_o c_o t^o` to a sampled trace curve on the
/// configured window (no window-safety check).
pub fn fit_trace_curve(trace: impl Fn(f64) -> f64, cfg: &HeatFitConfig) -> Result<HeatFit> {
    cfg.validate()?;
    let t = cfg.grid();
    let y: Vec<f64> = t.iter().map(|&ti| trace(ti)).collect();
    let (c, residual, cond) = lstsq(&t, &y, &cfg.orders)?;

    let step = (cfg.t_max / cfg.t_min).powf(1.0 / (cfg.points.max(2) - 1) as f64);
    let ts: Vec<f64> = t.iter().map(|&x| x * step).collect();
    let ys: Vec<f64> = ts.iter().map(|&ti| trace(ti)).collect();
    let (cs, _, _) = lstsq(&ts, &ys, &cfg.orders)?;

    let a2 = coeff_of(&cfg.orders, &c, 0);
    let c2 = coeff_of(&cfg.orders, &c, 1);
    Ok(HeatFit {
        a0: coeff_of(&cfg.orders, &c, -1),
        a2,
        a4: c2,
        coeffs: cfg.orders.iter().copied().zip(c.iter().copied()).collect(),
        residual,
        cond,
        window_shift: (coeff_of(&cfg.orders, &cs, 0) - a2).abs(),
        t2_ratio: (coeff_of(&cfg.orders, &c, 2).abs() * cfg.t_max * cfg.t_max) / a2.abs().max(f64::MIN_POSITIVE),
        t,
        trace: y,
    })
}

/// `φ₀(a k^{-2}) / φ₀(k^{-2})` from the algebra, with `k^{-2} = e^{-h}`.
pub fn kernel_projection_term(h: &TorusElement, a: &TorusElement, trunc: GnsTruncation) -> Result<f64> {
    h.require_self_adjoint()?;
    let sp = Spectral::of(&represent(h, trunc))?;
    let mut e0 = vec![ZERO; trunc.dim()];
    e0[trunc.origin()] = ONE;
    let w = sp.apply_fn(|x| C64::new((-x).exp(), 0.0), &e0);
    let k2inv = trunc.vector_to_element(*h.params(), &w);
    let num = a.multiply(&k2inv)?.trace0();
    let den = k2inv.trace0();
    Ok((num / den).re)
}

/// `⟨v₀, a v₀⟩` for the lowest eigenvector `v₀` of the Laplacian.
pub fn kernel_projection_eigen(heat: &HeatTrace, a: &TorusElement) -> Result<f64> {
    let vals = &heat.spectral.values;
    if vals.len() < 2 || vals[1] < 1e3 * vals[0].abs().max(1e-300) && vals[1] < 1e-6 {
        return Err(Error::NonPositive("kernel is not one-dimensional".into()));
    }
    let d = heat.spectral.dim();
    let v0: Vec<C64> = (0..d).map(|i| heat.spectral.vectors[(i, 0)]).collect();
    let img = LeftMul::new(a, heat.trunc).apply(&v0);
    Ok(v0.iter().zip(&img).map(|(x, y)| x.conj() * y).sum::<C64>().re)
}

/// `ζ(0) = a₂(a) - Tr(P_ker a)` using the eigenvector route for the kernel term.
pub fn zeta_at_zero(heat: &HeatTrace, a: &TorusElement, fit: &HeatFit) -> Result<f64> {
    Ok(fit.a2 - kernel_projection_eigen(heat, a)?)
}

/// Residuals of the KMS condition and of modular-flow invariance.
#[derive(Clone, Debug, Serialize)]
pub struct KmsReport {
    pub kms: f64,
    pub sigma: Vec<(f64, f64)>,
}

/// Checks `φ(ab) = φ(b e^{-h} a e^{h})` and `φ(σ_t(a)) = φ(a)` for
/// `φ(x) = φ₀(x e^{-h})`, with every exponential taken from one
/// decomposition of `represent(h)`.
pub fn kms_check(h: &TorusElement, a: &TorusElement, b: &TorusElement, trunc: GnsTruncation, times: &[f64]) -> Result<KmsReport> {
    h.require_self_adjoint()?;
    let reach = h.support_radius() + a.support_radius() + b.support_radius();
    if reach >= trunc.n() {
        return Err(Error::Truncation { n: trunc.n(), residual: reach as f64, tolerance: trunc.n() as f64 });
    }
    let sp = Spectral::of(&represent(h, trunc))?;
    let la = LeftMul::new(a, trunc);
    let lb = LeftMul::new(b, trunc);
    let o = trunc.origin();
    let mut e0 = vec![ZERO; trunc.dim()];
    e0[o] = ONE;
    let em = |v: &[C64]| sp.apply_fn(|x| C64::new((-x).exp(), 0.0), v);
    let ep = |v: &[C64]| sp.apply_fn(|x| C64::new(x.exp(), 0.0), v);
    let w = em(&e0);
    let lhs = la.apply(&lb.apply(&w))[o];
    let rhs = lb.apply(&em(&la.apply(&ep(&w))))[o];
    let base = la.apply(&w)[o];
    let sigma = times
        .iter()
        .map(|&t| {
            let u = |v: &[C64], sgn: f64| sp.apply_fn(|x| C64::from_polar(1.0, sgn * t * x), v);
            let val = u(&la.apply(&u(&w, -1.0)), 1.0)[o];
            (t, (val - base).norm())
        })
        .collect();
    Ok(KmsReport { kms: (lhs - rhs).norm(), sigma })
}

/// Hilbert-space trace of `Op(f)`, the lattice sum and the comparison integral.
#[derive(Clone, Debug, Serialize)]
pub struct OpTrace {
    pub hilbert_trace: C64,
    pub lattice_sum: C64,
    pub integral: C64,
    pub difference: C64,
    pub tail: f64,
}

/// Trace formula for `Op(f): U^{mn} ↦ f(m,n) U^{mn}` on the box `[-M, M]²`.
pub fn op_trace(f: impl Fn(f64, f64) -> TorusElement, m_box: usize, tail_tol: f64) -> Result<OpTrace> {
    let trunc = GnsTruncation::new(m_box)?;
    let b = m_box as i64;
    let mut tail = 0.0f64;
    let mut lattice_sum = ZERO;
    let mut hilbert_trace = ZERO;
    let mut e = vec![ZERO; trunc.dim()];
    for (i, (m, n)) in trunc.modes().enumerate().collect::<Vec<_>>() {
        let fm = f(m as f64, n as f64);
        lattice_sum += fm.trace0();
        e[i] = ONE;
        hilbert_trace += LeftMul::new(&fm, trunc).apply(&e)[i];
        e[i] = ZERO;
        if m.abs() == b || n.abs() == b {
            tail = tail.max(fm.trace0().norm());
        }
    }
    if tail > tail_tol {
        return Err(Error::Truncation { n: m_box, residual: tail, tolerance: tail_tol });
    }
    let (x, w) = gauss_legendre(20);
    let r = m_box as f64 + 1.0;
    let panels = 2 * (m_box + 1);
    let mut nodes = Vec::with_capacity(panels * x.len());
    for p in 0..panels {
        let lo = -r + p as f64;
        for (xi, wi) in x.iter().zip(w) {
            nodes.push((lo + 0.5 * (xi + 1.0), 0.5 * wi));
        }
    }
    let mut integral = ZERO;
    for &(u, wu) in &nodes {
        for &(v, wv) in &nodes {
            integral += f(u, v).trace0() * (wu * wv);
        }
    }
    Ok(OpTrace { hilbert_trace, lattice_sum, integral, difference: lattice_sum - integral, tail })
}

/// `π / Im τ`, the leading heat coefficient of the flat Laplacian.
pub fn flat_a0(params: &AlgebraParams) -> f64 {
    PI / params.tau.im
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> AlgebraParams {
        AlgebraParams::standard()
    }

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn dilaton() -> TorusElement {
        TorusElement::hermitian_from(p(), [((1, 0), c(0.12, 0.0)), ((0, 1), c(0.08, 0.03)), ((1, 1), c(0.05, 0.0))])
    }

    #[test]
    fn indexing_round_trips() {
        let t = GnsTruncation::new(3).unwrap();
        for i in 0..t.dim() {
            let (m, n) = t.mode(i);
            assert_eq!(t.index(m, n), Some(i));
        }
        assert_eq!(t.mode(t.origin()), (0, 0));
        assert_eq!(t.index(4, 0), None);
    }

    #[test]
    fn represent_unit_and_shift() {
        let t = GnsTruncation::new(2).unwrap();
        let id = represent(&TorusElement::one(p()), t);
        assert_eq!(id.leakage, 0);
        for i in 0..t.dim() {
            for j in 0..t.dim() {
                let want = if i == j { ONE } else { ZERO };
                assert!((id.entry(i, j) - want).norm() < 1e-15);
            }
        }
        let u1 = represent(&TorusElement::monomial(p(), 1, 0, ONE), t);
        let j = t.index(0, 1).unwrap();
        let i = t.index(1, 1).unwrap();
        assert!((u1.entry(i, j) - ONE).norm() < 1e-15);
        assert_eq!(u1.leakage, t.side());
        // U₂ · U₁ = e^{2πiθ} U₁U₂
        let u2 = represent(&TorusElement::monomial(p(), 0, 1, ONE), t);
        let j = t.index(1, 0).unwrap();
        let i = t.index(1, 1).unwrap();
        assert!((u2.entry(i, j) - p().phase(1)).norm() < 1e-15);
    }

    #[test]
    fn product_matches_on_interior() {
        let t = GnsTruncation::new(4).unwrap();
        let a = dilaton();
        let b = TorusElement::from_coeffs(p(), [((0, 0), c(0.3, 0.0)), ((-1, 1), c(0.2, -0.5))]);
        let ab = represent(&a.multiply(&b).unwrap(), t);
        let prod = represent(&a, t).matmul(&represent(&b, t));
        for j in 0..t.dim() {
            let (m, n) = t.mode(j);
            if m.abs() > 2 || n.abs() > 2 {
                continue;
            }
            for i in 0..t.dim() {
                assert!((ab.entry(i, j) - prod.entry(i, j)).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn self_adjoint_elements_give_hermitian_matrices() {
        let t = GnsTruncation::new(4).unwrap();
        assert!(represent(&dilaton(), t).hermitian_residual() < 1e-12);
    }

    #[test]
    fn reconstruct_round_trip() {
        let t = GnsTruncation::new(4).unwrap();
        let a = dilaton();
        let r = reconstruct(&represent(&a, t));
        assert!(r.element.distance(&a) < 1e-15);
        assert!(r.residual < 1e-15);
    }

    #[test]
    fn exp_coefficients_stable_under_doubling() {
        let h = dilaton();
        let get = |n| {
            let t = GnsTruncation::new(n).unwrap();
            let sp = Spectral::of(&represent(&h, t)).unwrap();
            let m = sp.matrix_fn(|x| C64::new(x.exp(), 0.0));
            let g = GnsMatrix { trunc: t, params: p(), data: m, leakage: 0, edge_eigenvalue: None };
            reconstruct(&g).element.restrict(3)
        };
        assert!(get(7).distance(&get(14)) < 1e-9);
    }

    #[test]
    fn flat_laplacian_diagonal() {
        let t = GnsTruncation::new(2).unwrap();
        let l = laplacian(LaplacianKind::Flat, &TorusElement::zero(p()), t).unwrap();
        let i = t.index(1, 0).unwrap();
        assert!((l.entry(i, i) - ONE).norm() < 1e-15);
        let j = t.index(1, 1).unwrap();
        assert!((l.entry(j, j).re - (1.3f64.powi(2) + 1.21)).abs() < 1e-13);
    }

    #[test]
    fn conformal_with_zero_dilaton_is_flat() {
        let t = GnsTruncation::new(3).unwrap();
        let z = TorusElement::zero(p());
        let a = laplacian(LaplacianKind::Conformal, &z, t).unwrap();
        let b = laplacian(LaplacianKind::Flat, &z, t).unwrap();
        for i in 0..t.dim() {
            for j in 0..t.dim() {
                assert!((a.entry(i, j) - b.entry(i, j)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn conformal_kernel_is_e_minus_h_half() {
        let t = GnsTruncation::new(6).unwrap();
        let h = dilaton();
        let l = laplacian(LaplacianKind::Conformal, &h, t).unwrap();
        let heat = HeatTrace::new(&l).unwrap();
        assert_eq!(heat.kernel_dimension(1e-12), 1);
        let sp = Spectral::of(&represent(&h, t)).unwrap();
        let mut e0 = vec![ZERO; t.dim()];
        e0[t.origin()] = ONE;
        let w = sp.apply_fn(|x| C64::new((-0.5 * x).exp(), 0.0), &e0);
        let nrm = w.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let overlap: C64 = (0..t.dim()).map(|i| heat.spectral.vectors[(i, 0)].conj() * w[i]).sum();
        assert!((overlap.norm() / nrm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flat_heat_trace_is_lattice_theta_sum() {
        let t = GnsTruncation::new(5).unwrap();
        let l = laplacian(LaplacianKind::Flat, &TorusElement::zero(p()), t).unwrap();
        let tt = 0.37;
        let got = heat_trace(&l, &TorusElement::one(p()), tt).unwrap();
        let mut want = 0.0;
        for m in -5i64..=5 {
            for n in -5i64..=5 {
                want += (-tt * p().laplace_multiplier(m, n)).exp();
            }
        }
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn flat_small_t_limit() {
        let t = GnsTruncation::new(20).unwrap();
        let l = laplacian(LaplacianKind::Flat, &TorusElement::zero(p()), t).unwrap();
        let heat = HeatTrace::new(&l).unwrap();
        let tt = 0.2;
        let v = heat.trace(&TorusElement::one(p()), tt).unwrap();
        // Poisson summation: Σ e^{-t|m+τn|²} = π/(t Im τ) + exponentially small.
        assert!((tt * v - flat_a0(&p())).abs() < 1e-10);
    }

    #[test]
    fn large_t_limit_is_kernel() {
        let t = GnsTruncation::new(3).unwrap();
        let l = laplacian(LaplacianKind::Flat, &TorusElement::zero(p()), t).unwrap();
        let v = heat_trace(&l, &TorusElement::one(p()), 80.0).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn window_rule_is_enforced() {
        let t = GnsTruncation::new(4).unwrap();
        let l = laplacian(LaplacianKind::Flat, &TorusElement::zero(p()), t).unwrap();
        let heat = HeatTrace::new(&l).unwrap();
        let cfg = HeatFitConfig { t_min: 0.01, ..HeatFitConfig::default() };
        assert!(matches!(
            fit_heat_coefficients(&heat, &TorusElement::one(p()), &cfg),
            Err(Error::WindowViolated { .. })
        ));
    }

    #[test]
    fn flat_fit_recovers_a0_and_zero_a2() {
        let t = GnsTruncation::new(16).unwrap();
        let l = laplacian(LaplacianKind::Flat, &TorusElement::zero(p()), t).unwrap();
        let heat = HeatTrace::new(&l).unwrap();
        let cfg = HeatFitConfig::default().for_heat(&heat);
        let fit = fit_heat_coefficients(&heat, &TorusElement::one(p()), &cfg).unwrap();
        let a0 = flat_a0(&p());
        assert!((fit.a0 - a0).abs() < 1e-3 * a0);
        // the exact expansion is π/(t Im τ) + 0 + O(t^∞) once the kernel
        // contribution 1 is included
        assert!((fit.a2 - 0.0).abs() < 2e-3 * a0, "a2 = {}", fit.a2);
    }

    #[test]
    fn kms_and_modular_flow() {
        let t = GnsTruncation::new(8).unwrap();
        let h = dilaton();
        let a = TorusElement::monomial(p(), 1, 0, ONE);
        let b = TorusElement::monomial(p(), -1, 1, ONE);
        let r = kms_check(&h, &a, &b, t, &[0.3, 1.0]).unwrap();
        assert!(r.kms < 1e-9, "kms {}", r.kms);
        for (_, s) in r.sigma {
            assert!(s < 1e-9);
        }
        let z = kms_check(&TorusElement::zero(p()), &a, &b, t, &[]).unwrap();
        assert!(z.kms < 1e-15);
    }

    #[test]
    fn kernel_term_two_routes() {
        let t = GnsTruncation::new(8).unwrap();
        let h = dilaton();
        let a = TorusElement::hermitian_from(p(), [((1, 0), c(0.5, 0.0)), ((1, -1), c(0.1, 0.2)), ((0, 0), c(0.25, 0.0))]);
        let heat = HeatTrace::new(&laplacian(LaplacianKind::Conformal, &h, t).unwrap()).unwrap();
        let x = kernel_projection_term(&h, &a, t).unwrap();
        let y = kernel_projection_eigen(&heat, &a).unwrap();
        assert!((x - y).abs() < 1e-8, "{x} vs {y}");
    }

    #[test]
    fn op_trace_gaussian() {
        let r = op_trace(|u, v| TorusElement::scalar(p(), C64::new((-(u * u + v * v)).exp(), 0.0)), 8, 1e-12).unwrap();
        assert!((r.hilbert_trace - r.lattice_sum).norm() < 1e-14);
        let theta3: f64 = (-30i64..=30).map(|k| (-(k * k) as f64).exp()).sum();
        assert!((r.lattice_sum.re - theta3 * theta3).abs() < 1e-12);
        assert!((r.integral.re - PI).abs() < 1e-12);
        // Poisson: Σ f(n) − ∫ f = π Σ_{k≠0} e^{-π²|k|²}
        let s: f64 = (-5i64..=5).map(|k| (-(PI * PI) * (k * k) as f64).exp()).sum();
        let pred = PI * (s * s - 1.0);
        assert!((r.difference.re - pred).abs() < 1e-12);
    }

    #[test]
    fn op_trace_point_support() {
        let a = TorusElement::from_coeffs(p(), [((0, 0), c(0.7, 0.1)), ((1, 0), ONE)]);
        let r = op_trace(|u, v| if u == 0.0 && v == 0.0 { a.clone() } else { TorusElement::zero(p()) }, 3, 1e-12).unwrap();
        assert!((r.lattice_sum - c(0.7, 0.1)).norm() < 1e-15);
        assert!((r.hilbert_trace - c(0.7, 0.1)).norm() < 1e-15);
    }

    #[test]
    fn slow_decay_is_rejected() {
        let r = op_trace(|u, v| TorusElement::scalar(p(), C64::new(1.0 / (1.0 + u * u + v * v), 0.0)), 4, 1e-6);
        assert!(matches!(r, Err(Error::Truncation { .. })));
    }
}
