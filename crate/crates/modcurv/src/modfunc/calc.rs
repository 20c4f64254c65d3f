//! Modular functional calculus `f(∇)`, `H(∇⁽¹⁾, ∇⁽²⁾)` with `∇ = -ad(h)`.
//!
//! Two routes. `Spectral` diagonalizes the GNS matrix of `h` and applies
//! `f(d_j - d_i)` entrywise. `Chebyshev` expands `f(y - x)` (resp.
//! `H(y - x, z - y)`) in tensor Chebyshev polynomials on the numerical range
//! of `h` and evaluates `Σ c T_p(h) x T_q(h) [y T_r(h)] · 1` with sparse
//! matrix-vector products only.

use std::f64::consts::PI;

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::gns::{represent, GnsTruncation, LeftMul, Spectral};
use crate::modfunc::kernels::CurvatureKernel;
use crate::nctorus::{AlgebraParams, TorusElement};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Route used to evaluate the calculus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CalcMethod {
    /// Chebyshev when the required degree is moderate, otherwise spectral.
    Auto,
    Chebyshev,
    Spectral,
}

#[derive(Clone, Debug)]
enum Route {
    Scalar,
    Chebyshev,
    Spectral(Box<Spectral>),
}

/// Result of a calculus evaluation.
#[derive(Clone, Debug)]
pub struct CalcOutput {
    pub element: TorusElement,
    /// Largest output coefficient on the outer ring of the box.
    pub residual: f64,
    /// Largest Chebyshev coefficient of top degree (0 for the spectral route).
    pub series_tail: f64,
}

/// Dilaton together with the data needed to apply `f(∇)`.
#[derive(Clone, Debug)]
pub struct ModularCalcContext {
    h: TorusElement,
    trunc: GnsTruncation,
    lm: LeftMul,
    center: f64,
    radius: f64,
    degree: usize,
    route: Route,
    tolerance: f64,
}

/// Chebyshev degree for kernels analytic in the strip `|Im s| < 2π`,
/// sampled on `s ∈ [-2R, 2R]`.
pub fn chebyshev_degree(radius: f64) -> usize {
    if radius <= 0.0 {
        return 8;
    }
    let beta = PI / radius;
    let rho = beta + (1.0 + beta * beta).sqrt();
    ((37.0 / rho.ln()).ceil() as usize + 2).clamp(8, 96)
}

impl ModularCalcContext {
    pub fn new(h: &TorusElement, trunc: GnsTruncation, method: CalcMethod) -> Result<Self> {
        h.require_self_adjoint()?;
        if h.support_radius() >= trunc.n() {
            return Err(Error::Truncation { n: trunc.n(), residual: h.support_radius() as f64, tolerance: trunc.n() as f64 });
        }
        let center = h.coeff(0, 0).re;
        let radius = h.l1_norm() - h.coeff(0, 0).norm();
        let degree = chebyshev_degree(radius);
        let lm = LeftMul::new(h, trunc);
        let route = if radius < 1e-13 {
            Route::Scalar
        } else {
            match method {
                CalcMethod::Chebyshev => Route::Chebyshev,
                CalcMethod::Auto if degree <= 64 => Route::Chebyshev,
                _ => Route::Spectral(Box::new(Spectral::of(&represent(h, trunc))?)),
            }
        };
        Ok(Self { h: h.clone(), trunc, lm, center, radius, degree, route, tolerance: 1e-6 })
    }

    /// Ring-mass tolerance above which results are rejected.
    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }

    pub fn h(&self) -> &TorusElement {
        &self.h
    }

    pub fn trunc(&self) -> GnsTruncation {
        self.trunc
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn params(&self) -> AlgebraParams {
        *self.h.params()
    }

    pub fn method(&self) -> CalcMethod {
        match self.route {
            Route::Spectral(_) => CalcMethod::Spectral,
            _ => CalcMethod::Chebyshev,
        }
    }

    /// `max |VᴴV - I|` for the spectral route, 0 otherwise.
    pub fn unitarity_residual(&self) -> f64 {
        let Route::Spectral(sp) = &self.route else { return 0.0 };
        let v = &sp.vectors;
        let g = v.adjoint() * v;
        let mut r = 0.0f64;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let want = if i == j { 1.0 } else { 0.0 };
                r = r.max((g[(i, j)] - C64::new(want, 0.0)).norm());
            }
        }
        r
    }

    fn e0(&self) -> Vec<C64> {
        let mut v = vec![ZERO; self.trunc.dim()];
        v[self.trunc.origin()] = C64::new(1.0, 0.0);
        v
    }

    // (L_h - c) v / R
    fn hat(&self, v: &[C64]) -> Vec<C64> {
        let mut out = self.lm.apply(v);
        let s = 1.0 / self.radius;
        for (o, x) in out.iter_mut().zip(v) {
            *o = (*o - self.center * x) * s;
        }
        out
    }

    fn forward(&self, count: usize) -> Vec<Vec<C64>> {
        let mut w = vec![self.e0()];
        if count > 1 {
            w.push(self.hat(&w[0]));
        }
        while w.len() < count {
            let k = w.len();
            let a = self.hat(&w[k - 1]);
            let next = a.iter().zip(&w[k - 2]).map(|(x, y)| 2.0 * x - y).collect();
            w.push(next);
        }
        w
    }

    // Σ_p T_p(ĥ) u_p
    fn clenshaw(&self, u: &[Vec<C64>]) -> Vec<C64> {
        let d = self.trunc.dim();
        let mut b1 = vec![ZERO; d];
        let mut b2 = vec![ZERO; d];
        for k in (1..u.len()).rev() {
            let a = self.hat(&b1);
            let b0: Vec<C64> = (0..d).map(|i| u[k][i] + 2.0 * a[i] - b2[i]).collect();
            b2 = std::mem::replace(&mut b1, b0);
        }
        let a = self.hat(&b1);
        (0..d).map(|i| u[0][i] + a[i] - b2[i]).collect()
    }

    fn finish(&self, v: &[C64], series_tail: f64) -> Result<CalcOutput> {
        let residual = self.trunc.ring_mass(v);
        if residual > self.tolerance {
            return Err(Error::Truncation { n: self.trunc.n(), residual, tolerance: self.tolerance });
        }
        Ok(CalcOutput { element: self.trunc.vector_to_element(self.params(), v), residual, series_tail })
    }

    fn check_input(&self, x: &TorusElement) -> Result<Vec<C64>> {
        if *x.params() != self.params() {
            return Err(Error::ParamsMismatch);
        }
        self.trunc.element_to_vector(x)
    }

    /// The element `f(h)`.
    pub fn fn_of_h(&self, f: impl Fn(f64) -> f64) -> Result<CalcOutput> {
        match &self.route {
            Route::Scalar => {
                let v = f(self.center);
                let mut e = self.e0();
                e[self.trunc.origin()] = C64::new(v, 0.0);
                self.finish(&e, 0.0)
            }
            Route::Chebyshev => {
                let p = self.degree.max(24);
                let c = cheb_coeffs_1d(|x| f(self.center + self.radius * x), p);
                let e0 = self.e0();
                let u: Vec<Vec<C64>> = c.iter().map(|&ck| e0.iter().map(|z| z * ck).collect()).collect();
                let tail = c[p - 2..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
                self.finish(&self.clenshaw(&u), tail)
            }
            Route::Spectral(sp) => {
                let v = sp.apply_fn(|x| C64::new(f(x), 0.0), &self.e0());
                self.finish(&v, 0.0)
            }
        }
    }

    /// `f(∇)(x)`.
    pub fn apply1(&self, f: impl Fn(f64) -> f64, x: &TorusElement) -> Result<CalcOutput> {
        let xv = self.check_input(x)?;
        match &self.route {
            Route::Scalar => {
                let v: Vec<C64> = xv.iter().map(|z| z * f(0.0)).collect();
                self.finish(&v, 0.0)
            }
            Route::Chebyshev => {
                let p = self.degree;
                let r = self.radius;
                let c = cheb_coeffs_2d(|a, b| f(r * (b - a)), p);
                let lx = LeftMul::new(x, self.trunc);
                let w = self.forward(p);
                let z: Vec<Vec<C64>> = w.iter().map(|wq| lx.apply(wq)).collect();
                let d = self.trunc.dim();
                let u: Vec<Vec<C64>> = (0..p)
                    .map(|i| {
                        let mut acc = vec![ZERO; d];
                        for (q, zq) in z.iter().enumerate() {
                            let cq = c[i * p + q];
                            if cq != 0.0 {
                                acc.iter_mut().zip(zq).for_each(|(a, v)| *a += v * cq);
                            }
                        }
                        acc
                    })
                    .collect();
                let tail = tail_2d(&c, p);
                self.finish(&self.clenshaw(&u), tail)
            }
            Route::Spectral(sp) => {
                let xt = to_eigen(sp, x, self.trunc);
                let y = sp.to_eigenbasis(&self.e0());
                let d = sp.dim();
                let vals = &sp.values;
                let out: Vec<C64> = (0..d).map(|i| (0..d).map(|j| xt[(i, j)] * y[j] * f(vals[j] - vals[i])).sum()).collect();
                self.finish(&sp.from_eigenbasis(&out), 0.0)
            }
        }
    }

    /// `Σ_k H(∇⁽¹⁾, ∇⁽²⁾)(x_k ⊗ y_k)`.
    pub fn apply2(&self, f: impl Fn(f64, f64) -> f64 + Sync, pairs: &[(TorusElement, TorusElement)]) -> Result<CalcOutput> {
        let d = self.trunc.dim();
        let mut total = vec![ZERO; d];
        let mut tail = 0.0f64;
        match &self.route {
            Route::Scalar => {
                let h00 = f(0.0, 0.0);
                for (x, y) in pairs {
                    self.check_input(x)?;
                    self.check_input(y)?;
                    let xy = x.multiply(y)?.restrict(self.trunc.n());
                    for (i, z) in self.trunc.element_to_vector(&xy)?.into_iter().enumerate() {
                        total[i] += z * h00;
                    }
                }
            }
            Route::Chebyshev => {
                let p = self.degree;
                let r = self.radius;
                let c = cheb_coeffs_3d(|a, b, cz| f(r * (b - a), r * (cz - b)), p);
                tail = tail_3d(&c, p);
                let w = self.forward(p);
                for (x, y) in pairs {
                    self.check_input(x)?;
                    self.check_input(y)?;
                    let lx = LeftMul::new(x, self.trunc);
                    let ly = LeftMul::new(y, self.trunc);
                    let a: Vec<Vec<C64>> = w.iter().map(|wr| ly.apply(wr)).collect();
                    let u: Vec<Vec<C64>> = (0..p)
                        .map(|i| {
                            let v: Vec<Vec<C64>> = (0..p)
                                .map(|q| {
                                    let mut acc = vec![ZERO; d];
                                    for (rr, ar) in a.iter().enumerate() {
                                        let cc = c[(i * p + q) * p + rr];
                                        if cc != 0.0 {
                                            acc.iter_mut().zip(ar).for_each(|(s, v)| *s += v * cc);
                                        }
                                    }
                                    acc
                                })
                                .collect();
                            lx.apply(&self.clenshaw(&v))
                        })
                        .collect();
                    let res = self.clenshaw(&u);
                    total.iter_mut().zip(res).for_each(|(t, v)| *t += v);
                }
            }
            Route::Spectral(sp) => {
                let e = sp.to_eigenbasis(&self.e0());
                let vals = &sp.values;
                for (x, y) in pairs {
                    self.check_input(x)?;
                    self.check_input(y)?;
                    let xt = to_eigen(sp, x, self.trunc);
                    let yt = to_eigen(sp, y, self.trunc);
                    let ye: Vec<Vec<C64>> = (0..d).map(|j| (0..d).map(|l| yt[(j, l)] * e[l]).collect()).collect();
                    let row = |i: usize| -> C64 {
                        let di = vals[i];
                        let mut s = ZERO;
                        for j in 0..d {
                            let xij = xt[(i, j)];
                            if xij.norm() < 1e-300 {
                                continue;
                            }
                            let dj = vals[j];
                            let inner: C64 = (0..d).map(|l| ye[j][l] * f(dj - di, vals[l] - dj)).sum();
                            s += xij * inner;
                        }
                        s
                    };
                    #[cfg(feature = "parallel")]
                    let out: Vec<C64> = {
                        use rayon::prelude::*;
                        (0..d).into_par_iter().map(row).collect()
                    };
                    #[cfg(not(feature = "parallel"))]
                    let out: Vec<C64> = (0..d).map(row).collect();
                    let back = sp.from_eigenbasis(&out);
                    total.iter_mut().zip(back).for_each(|(t, v)| *t += v);
                }
            }
        }
        self.finish(&total, tail)
    }
}

fn to_eigen(sp: &Spectral, x: &TorusElement, trunc: GnsTruncation) -> faer::Mat<C64> {
    let m = represent(x, trunc);
    sp.vectors.adjoint() * &m.data * &sp.vectors
}

fn cheb_nodes(p: usize) -> Vec<f64> {
    (0..p).map(|k| (PI * (k as f64 + 0.5) / p as f64).cos()).collect()
}

// cos(π j (k + ½) / p) scaled by (2 - δ_j0)/p
fn cheb_transform(p: usize) -> Vec<f64> {
    let mut t = vec![0.0; p * p];
    for j in 0..p {
        let s = if j == 0 { 1.0 } else { 2.0 } / p as f64;
        for k in 0..p {
            t[j * p + k] = s * (PI * j as f64 * (k as f64 + 0.5) / p as f64).cos();
        }
    }
    t
}

/// Chebyshev coefficients of `f` on `[-1, 1]` from `p` first-kind nodes.
pub fn cheb_coeffs_1d(f: impl Fn(f64) -> f64, p: usize) -> Vec<f64> {
    let x = cheb_nodes(p);
    let t = cheb_transform(p);
    let v: Vec<f64> = x.iter().map(|&a| f(a)).collect();
    (0..p).map(|j| (0..p).map(|k| t[j * p + k] * v[k]).sum()).collect()
}

fn cheb_coeffs_2d(f: impl Fn(f64, f64) -> f64, p: usize) -> Vec<f64> {
    let x = cheb_nodes(p);
    let t = cheb_transform(p);
    let mut v = vec![0.0; p * p];
    for a in 0..p {
        for b in 0..p {
            v[a * p + b] = f(x[a], x[b]);
        }
    }
    transform_axis(&mut v, &t, p, 2);
    v
}

fn cheb_coeffs_3d(f: impl Fn(f64, f64, f64) -> f64 + Sync, p: usize) -> Vec<f64> {
    let x = cheb_nodes(p);
    let t = cheb_transform(p);
    let plane = |a: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(p * p);
        for b in 0..p {
            for c in 0..p {
                out.push(f(x[a], x[b], x[c]));
            }
        }
        out
    };
    #[cfg(feature = "parallel")]
    let planes: Vec<Vec<f64>> = {
        use rayon::prelude::*;
        (0..p).into_par_iter().map(plane).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let planes: Vec<Vec<f64>> = (0..p).map(plane).collect();
    let mut v: Vec<f64> = planes.concat();
    transform_axis(&mut v, &t, p, 3);
    v
}

// Apply the 1-D transform along every axis of a row-major p^dims array.
fn transform_axis(v: &mut [f64], t: &[f64], p: usize, dims: u32) {
    for axis in 0..dims {
        let stride = p.pow(dims - 1 - axis);
        let outer = v.len() / (stride * p);
        let mut buf = vec![0.0; p];
        for o in 0..outer {
            for s in 0..stride {
                let base = o * stride * p + s;
                for j in 0..p {
                    buf[j] = (0..p).map(|k| t[j * p + k] * v[base + k * stride]).sum();
                }
                for j in 0..p {
                    v[base + j * stride] = buf[j];
                }
            }
        }
    }
}

fn tail_2d(c: &[f64], p: usize) -> f64 {
    let mut m = 0.0f64;
    for i in 0..p {
        for j in 0..p {
            if i + 2 >= p || j + 2 >= p {
                m = m.max(c[i * p + j].abs());
            }
        }
    }
    m
}

fn tail_3d(c: &[f64], p: usize) -> f64 {
    let mut m = 0.0f64;
    for i in 0..p {
        for j in 0..p {
            for k in 0..p {
                if i + 2 >= p || j + 2 >= p || k + 2 >= p {
                    m = m.max(c[(i * p + j) * p + k].abs());
                }
            }
        }
    }
    m
}

/// `f(∇)(x)` for a univariate curvature kernel.
pub fn mod_calc_1(f: &CurvatureKernel, ctx: &ModularCalcContext, x: &TorusElement) -> Result<CalcOutput> {
    if f.kind.is_bivariate() {
        return Err(Error::Unsupported(format!("{:?} is bivariate", f.kind)));
    }
    ctx.apply1(|s| f.eval(s), x)
}

/// `Σ H(∇⁽¹⁾, ∇⁽²⁾)(x_k ⊗ y_k)` for a bivariate curvature kernel.
pub fn mod_calc_2(f: &CurvatureKernel, ctx: &ModularCalcContext, pairs: &[(TorusElement, TorusElement)]) -> Result<CalcOutput> {
    if !f.kind.is_bivariate() {
        return Err(Error::Unsupported(format!("{:?} is univariate", f.kind)));
    }
    ctx.apply2(|s, t| f.eval2(s, t), pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modfunc::kernels::{h0, k0, KernelKind};

    fn p() -> AlgebraParams {
        AlgebraParams::standard()
    }

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn dilaton() -> TorusElement {
        TorusElement::hermitian_from(p(), [((1, 0), c(0.12, 0.0)), ((0, 1), c(0.08, 0.03)), ((1, 1), c(0.05, 0.0))])
    }

    fn probe() -> TorusElement {
        TorusElement::from_coeffs(p(), [((1, 0), c(0.4, 0.1)), ((0, -1), c(-0.2, 0.3)), ((0, 0), c(0.5, 0.0))])
    }

    fn ctx(n: usize, m: CalcMethod) -> ModularCalcContext {
        ModularCalcContext::new(&dilaton(), GnsTruncation::new(n).unwrap(), m).unwrap()
    }

    #[test]
    fn chebyshev_coefficients_of_polynomial() {
        let c = cheb_coeffs_1d(|x| 4.0 * x * x * x - 3.0 * x, 8);
        assert!((c[3] - 1.0).abs() < 1e-14);
        assert!(c.iter().enumerate().all(|(i, v)| i == 3 || v.abs() < 1e-14));
    }

    #[test]
    fn identity_kernel_is_commutator() {
        let x = probe();
        let want = &x.multiply(&dilaton()).unwrap() - &dilaton().multiply(&x).unwrap();
        for m in [CalcMethod::Chebyshev, CalcMethod::Spectral] {
            let got = ctx(6, m).apply1(|s| s, &x).unwrap();
            assert!(got.element.distance(&want) < 1e-12, "{m:?}");
        }
    }

    #[test]
    fn constant_kernels() {
        let x = probe();
        let y = dilaton();
        for m in [CalcMethod::Chebyshev, CalcMethod::Spectral] {
            let cx = ctx(6, m);
            assert!(cx.apply1(|_| 1.0, &x).unwrap().element.distance(&x) < 1e-10);
            let prod = cx.apply2(|_, _| 1.0, &[(x.clone(), y.clone())]).unwrap();
            assert!(prod.element.distance(&x.multiply(&y).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn scalar_dilaton() {
        let h = TorusElement::scalar(p(), c(0.7, 0.0));
        let cx = ModularCalcContext::new(&h, GnsTruncation::new(4).unwrap(), CalcMethod::Auto).unwrap();
        let x = probe();
        assert!(cx.apply1(k0, &x).unwrap().element.distance(&x.scale_re(1.0 / 3.0)) < 1e-15);
        let y = dilaton();
        let out = cx.apply2(h0, &[(x.clone(), y.clone())]).unwrap();
        assert!(out.element.distance(&x.multiply(&y).unwrap().scale_re(h0(0.0, 0.0))) < 1e-15);
        let e = cx.fn_of_h(|s| (-s).exp()).unwrap();
        assert!((e.element.trace0().re - (-0.7f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn commuting_input_is_scaled() {
        let h = TorusElement::hermitian_from(p(), [((1, 1), c(0.3, 0.0))]);
        let x = TorusElement::monomial(p(), 2, 2, c(1.0, 0.0));
        let cx = ModularCalcContext::new(&h, GnsTruncation::new(14).unwrap(), CalcMethod::Chebyshev).unwrap();
        let got = cx.apply1(k0, &x).unwrap();
        assert!(got.element.distance(&x.scale_re(1.0 / 3.0)) < 1e-12);
    }

    #[test]
    fn routes_agree_univariate() {
        let x = probe();
        let a = ctx(7, CalcMethod::Chebyshev).apply1(k0, &x).unwrap();
        let b = ctx(7, CalcMethod::Spectral).apply1(k0, &x).unwrap();
        assert!(a.element.distance(&b.element) < 1e-12);
    }

    #[test]
    fn routes_agree_bivariate() {
        let x = probe();
        let y = dilaton().derive(1);
        let pairs = [(x.clone(), y.clone()), (y, x)];
        let a = ctx(5, CalcMethod::Chebyshev).apply2(h0, &pairs).unwrap();
        let b = ctx(5, CalcMethod::Spectral).apply2(h0, &pairs).unwrap();
        assert!(a.element.distance(&b.element) < 1e-12, "{}", a.element.distance(&b.element));
    }

    #[test]
    fn exponential_of_h_matches_power_series() {
        let h = dilaton();
        let got = ctx(8, CalcMethod::Chebyshev).fn_of_h(f64::exp).unwrap().element.restrict(4);
        let mut term = TorusElement::one(p());
        let mut sum = TorusElement::one(p());
        for k in 1..30 {
            term = term.multiply(&h).unwrap().scale_re(1.0 / k as f64);
            sum = &sum + &term;
        }
        assert!(got.distance(&sum.restrict(4)) < 1e-12);
    }

    #[test]
    fn doubling_n_is_stable() {
        let x = dilaton().conformal_laplacian_of().unwrap();
        let a = ctx(8, CalcMethod::Auto).apply1(k0, &x).unwrap().element.restrict(4);
        let b = ctx(16, CalcMethod::Auto).apply1(k0, &x).unwrap().element.restrict(4);
        assert!(a.distance(&b) < 1e-8);
    }

    #[test]
    fn kernel_wrappers_check_arity() {
        let cx = ctx(4, CalcMethod::Auto);
        let k = CurvatureKernel::new(KernelKind::H0);
        assert!(mod_calc_1(&k, &cx, &probe()).is_err());
        let k = CurvatureKernel::new(KernelKind::K0);
        assert!(mod_calc_2(&k, &cx, &[]).is_err());
    }

    #[test]
    fn spectral_unitarity() {
        assert!(ctx(4, CalcMethod::Spectral).unitarity_residual() < 1e-10);
    }
}
