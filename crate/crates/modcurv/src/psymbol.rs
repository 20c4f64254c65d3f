//! Twisted pseudodifferential multipliers over `(A_θ^∞, ℝ², α)`.
//!
//! Symbols are finite sums `Σ p(ξ, λ) · w` of scalar polynomials times
//! noncommutative words `w` in algebra atoms and the resolvent atom
//! `b = (k²|η|² − λ)^{-1}`, `η = ξ₁ + τ̄ξ₂`. Derivatives in `ξ` and the
//! derivations `δ_j` act on words by the product rule, with
//! `∂b = −b ∂(k²|η|²) b`.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64 as C64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gns::{represent, GnsTruncation, LeftMul, Spectral};
use crate::modfunc::calc::{CalcMethod, ModularCalcContext};
use crate::nctorus::{AlgebraParams, TorusElement};
use crate::quad::adaptive_gk15;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };
const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Skew-symmetric twist `B` of the cocycle `e^{i⟨Bx,y⟩}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TwistData {
    pub b: [[f64; 2]; 2],
}

impl TwistData {
    pub fn new(b12: f64) -> Self {
        Self { b: [[0.0, b12], [-b12, 0.0]] }
    }

    pub fn from_matrix(b: [[f64; 2]; 2]) -> Result<Self> {
        let skew = (b[0][0]).abs() + (b[1][1]).abs() + (b[0][1] + b[1][0]).abs();
        if skew > 1e-14 {
            return Err(Error::InvalidParams("twist matrix must be skew-symmetric".into()));
        }
        Ok(Self { b })
    }

    pub fn untwisted() -> Self {
        Self::new(0.0)
    }
}

/// `δ^γ a`: coefficientwise multiplier `m^{γ₁} n^{γ₂}`.
pub fn delta_gamma(a: &TorusElement, gamma: (u32, u32)) -> TorusElement {
    a.delta_multi(gamma)
}

/// Algebra atom: `(δ^{(g1,g2)} base)` or its adjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Atom {
    pub base: u16,
    pub g1: u8,
    pub g2: u8,
    pub star: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Factor {
    A(Atom),
    /// Resolvent `(k²|η|² − λ)^{-1}`.
    B,
}

type Word = Vec<Factor>;
/// Monomial exponents `(ξ₁, ξ₂, λ)`.
type Mono = [u8; 3];

/// Scalar polynomial in `ξ₁, ξ₂, λ`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Poly {
    terms: BTreeMap<Mono, C64>,
}

impl Poly {
    pub fn constant(c: C64) -> Self {
        Self::monomial([0, 0, 0], c)
    }

    pub fn monomial(m: Mono, c: C64) -> Self {
        let mut p = Self::default();
        p.add_term(m, c);
        p
    }

    /// `|η|² = ξ₁² + 2Re τ ξ₁ξ₂ + |τ|² ξ₂²`.
    pub fn eta_sq(params: &AlgebraParams) -> Self {
        let mut p = Self::default();
        p.add_term([2, 0, 0], ONE);
        p.add_term([1, 1, 0], C64::new(2.0 * params.tau.re, 0.0));
        p.add_term([0, 2, 0], C64::new(params.tau.norm_sqr(), 0.0));
        p
    }

    /// `η = ξ₁ + τ̄ ξ₂`.
    pub fn eta(params: &AlgebraParams) -> Self {
        let mut p = Self::monomial([1, 0, 0], ONE);
        p.add_term([0, 1, 0], params.tau.conj());
        p
    }

    /// `η̄ = ξ₁ + τ ξ₂`.
    pub fn eta_bar(params: &AlgebraParams) -> Self {
        let mut p = Self::monomial([1, 0, 0], ONE);
        p.add_term([0, 1, 0], params.tau);
        p
    }

    fn add_term(&mut self, m: Mono, c: C64) {
        let e = self.terms.entry(m).or_insert(ZERO);
        *e += c;
        if e.norm() == 0.0 {
            self.terms.remove(&m);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut r = self.clone();
        for (&m, &c) in &o.terms {
            r.add_term(m, c);
        }
        r
    }

    pub fn scale(&self, s: C64) -> Self {
        let mut r = Self::default();
        for (&m, &c) in &self.terms {
            r.add_term(m, c * s);
        }
        r
    }

    pub fn mul(&self, o: &Self) -> Self {
        let mut r = Self::default();
        for (a, &x) in &self.terms {
            for (b, &y) in &o.terms {
                r.add_term([a[0] + b[0], a[1] + b[1], a[2] + b[2]], x * y);
            }
        }
        r
    }

    pub fn d_xi(&self, j: usize) -> Self {
        let mut r = Self::default();
        for (m, &c) in &self.terms {
            if m[j] > 0 {
                let mut e = *m;
                e[j] -= 1;
                r.add_term(e, c * m[j] as f64);
            }
        }
        r
    }

    pub fn conj(&self) -> Self {
        Self { terms: self.terms.iter().map(|(&m, c)| (m, c.conj())).collect() }
    }

    pub fn eval(&self, xi: [f64; 2], lambda: f64) -> C64 {
        self.terms
            .iter()
            .map(|(m, c)| c * xi[0].powi(m[0] as i32) * xi[1].powi(m[1] as i32) * lambda.powi(m[2] as i32))
            .sum()
    }

    /// Parabolic degrees (`λ` counts 2) present in the polynomial.
    pub fn degrees(&self) -> impl Iterator<Item = i32> + '_ {
        self.terms.keys().map(|m| m[0] as i32 + m[1] as i32 + 2 * m[2] as i32)
    }

    pub fn terms(&self) -> impl Iterator<Item = (Mono, C64)> + '_ {
        self.terms.iter().map(|(&m, &c)| (m, c))
    }
}

/// Registry of the algebra elements that symbols refer to.
#[derive(Debug)]
pub struct SymbolContext {
    params: AlgebraParams,
    twist: TwistData,
    bases: Vec<TorusElement>,
    k2: u16,
    cache: RefCell<HashMap<Atom, TorusElement>>,
}

impl SymbolContext {
    /// `k2` is the positive coefficient inside the resolvent atom.
    pub fn new(k2: &TorusElement, twist: TwistData) -> Self {
        Self { params: *k2.params(), twist, bases: vec![k2.clone()], k2: 0, cache: RefCell::new(HashMap::new()) }
    }

    pub fn params(&self) -> &AlgebraParams {
        &self.params
    }

    pub fn twist(&self) -> &TwistData {
        &self.twist
    }

    pub fn register(&mut self, a: &TorusElement) -> Atom {
        self.bases.push(a.clone());
        Atom { base: (self.bases.len() - 1) as u16, g1: 0, g2: 0, star: false }
    }

    pub fn k2_atom(&self) -> Atom {
        Atom { base: self.k2, g1: 0, g2: 0, star: false }
    }

    pub fn element(&self, a: Atom) -> TorusElement {
        if let Some(e) = self.cache.borrow().get(&a) {
            return e.clone();
        }
        let mut e = self.bases[a.base as usize].delta_multi((a.g1 as u32, a.g2 as u32));
        if a.star {
            e = e.star();
        }
        self.cache.borrow_mut().insert(a, e.clone());
        e
    }

    fn is_zero(&self, a: Atom) -> bool {
        self.element(a).is_empty()
    }
}

/// Symbol expression `Σ p_w(ξ, λ) · w`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SymbolExpr {
    terms: BTreeMap<Word, Poly>,
}

impl SymbolExpr {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: C64) -> Self {
        Self::from_term(Poly::constant(c), vec![])
    }

    pub fn poly(p: Poly) -> Self {
        Self::from_term(p, vec![])
    }

    /// `ξ_j` (j = 1, 2).
    pub fn xi(j: usize) -> Self {
        let mut m = [0u8; 3];
        m[j - 1] = 1;
        Self::poly(Poly::monomial(m, ONE))
    }

    pub fn lambda() -> Self {
        Self::poly(Poly::monomial([0, 0, 1], ONE))
    }

    pub fn atom(a: Atom) -> Self {
        Self::from_term(Poly::constant(ONE), vec![Factor::A(a)])
    }

    pub fn resolvent() -> Self {
        Self::from_term(Poly::constant(ONE), vec![Factor::B])
    }

    pub fn from_term(p: Poly, w: Word) -> Self {
        let mut e = Self::zero();
        e.add_term(w, p);
        e
    }

    fn add_term(&mut self, w: Word, p: Poly) {
        if p.is_zero() {
            return;
        }
        let slot = self.terms.entry(w.clone()).or_default();
        *slot = slot.add(&p);
        if slot.is_zero() {
            self.terms.remove(&w);
        }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Word, &Poly)> {
        self.terms.iter()
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut r = self.clone();
        for (w, p) in &o.terms {
            r.add_term(w.clone(), p.clone());
        }
        r
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.add(&o.scale(C64::new(-1.0, 0.0)))
    }

    pub fn scale(&self, s: C64) -> Self {
        let mut r = Self::zero();
        for (w, p) in &self.terms {
            r.add_term(w.clone(), p.scale(s));
        }
        r
    }

    pub fn mul(&self, o: &Self) -> Self {
        let mut r = Self::zero();
        for (w1, p1) in &self.terms {
            for (w2, p2) in &o.terms {
                let mut w = w1.clone();
                w.extend_from_slice(w2);
                r.add_term(w, p1.mul(p2));
            }
        }
        r
    }

    /// Product rule over a word given the derivative of each factor.
    fn derive_words(&self, ctx: &SymbolContext, df: impl Fn(Factor) -> Option<(Poly, Word)>, dp: impl Fn(&Poly) -> Poly) -> Self {
        let mut r = Self::zero();
        for (w, p) in &self.terms {
            r.add_term(w.clone(), dp(p));
            for (i, &f) in w.iter().enumerate() {
                if let Some((q, repl)) = df(f) {
                    if repl.iter().any(|x| matches!(x, Factor::A(a) if ctx.is_zero(*a))) {
                        continue;
                    }
                    let mut nw = w[..i].to_vec();
                    nw.extend_from_slice(&repl);
                    nw.extend_from_slice(&w[i + 1..]);
                    r.add_term(nw, p.mul(&q));
                }
            }
        }
        r
    }

    /// `∂/∂ξ_j` (j = 1, 2).
    pub fn d_xi(&self, j: usize, ctx: &SymbolContext) -> Self {
        let de = Poly::eta_sq(&ctx.params).d_xi(j - 1).scale(C64::new(-1.0, 0.0));
        let k2 = ctx.k2_atom();
        self.derive_words(
            ctx,
            |f| match f {
                Factor::B => Some((de.clone(), vec![Factor::B, Factor::A(k2), Factor::B])),
                Factor::A(_) => None,
            },
            |p| p.d_xi(j - 1),
        )
    }

    /// `δ_j` (j = 1, 2).
    pub fn delta(&self, j: usize, ctx: &SymbolContext) -> Self {
        let e = Poly::eta_sq(&ctx.params).scale(C64::new(-1.0, 0.0));
        let mut dk2 = ctx.k2_atom();
        if j == 1 {
            dk2.g1 += 1;
        } else {
            dk2.g2 += 1;
        }
        self.derive_words(
            ctx,
            |f| match f {
                Factor::B => Some((e.clone(), vec![Factor::B, Factor::A(dk2), Factor::B])),
                Factor::A(mut a) => {
                    if j == 1 {
                        a.g1 += 1;
                    } else {
                        a.g2 += 1;
                    }
                    // δ(x*) = −(δx)*
                    let s = if a.star { -1.0 } else { 1.0 };
                    Some((Poly::constant(C64::new(s, 0.0)), vec![Factor::A(a)]))
                }
            },
            |_| Poly::default(),
        )
    }

    /// `D_k = δ_k − i Σ_l b_{lk} ∂/∂ξ_l`.
    pub fn twisted_d(&self, k: usize, ctx: &SymbolContext) -> Self {
        let mut r = self.delta(k, ctx);
        for l in 1..=2 {
            let b = ctx.twist.b[l - 1][k - 1];
            if b != 0.0 {
                r = r.add(&self.d_xi(l, ctx).scale(-I * b));
            }
        }
        r
    }

    /// Pointwise adjoint `f(ξ)*` (λ real).
    pub fn star(&self) -> Self {
        let mut r = Self::zero();
        for (w, p) in &self.terms {
            let nw: Word = w
                .iter()
                .rev()
                .map(|f| match f {
                    Factor::A(a) => Factor::A(Atom { star: !a.star, ..*a }),
                    Factor::B => Factor::B,
                })
                .collect();
            r.add_term(nw, p.conj());
        }
        r
    }

    /// Common parabolic degree of all terms, if homogeneous.
    pub fn homogeneity(&self) -> Option<i32> {
        let mut deg = None;
        for (w, p) in &self.terms {
            let nb = w.iter().filter(|f| matches!(f, Factor::B)).count() as i32;
            for d in p.degrees() {
                let d = d - 2 * nb;
                match deg {
                    None => deg = Some(d),
                    Some(e) if e != d => return None,
                    _ => {}
                }
            }
        }
        deg
    }

    /// True when no resolvent atom occurs (polynomial in `ξ`).
    pub fn is_differential(&self) -> bool {
        self.terms.keys().all(|w| !w.contains(&Factor::B))
    }

    /// Highest total `ξ`-degree.
    pub fn xi_degree(&self) -> u32 {
        self.terms.values().flat_map(|p| p.terms().map(|(m, _)| m[0] as u32 + m[1] as u32)).max().unwrap_or(0)
    }
}

fn multi_indices(order: u32) -> Vec<(u32, u32)> {
    let mut v = Vec::new();
    for n in 0..=order {
        for g1 in 0..=n {
            v.push((g1, n - g1));
        }
    }
    v
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// `Σ_{|γ|≤M} (1/γ!) ∂_ξ^γ f · D^γ g`, exact when `f` is a differential
/// symbol of degree `≤ M`.
pub fn compose_symbols(f: &SymbolExpr, g: &SymbolExpr, order: u32, ctx: &SymbolContext) -> SymbolExpr {
    let mut out = SymbolExpr::zero();
    for (g1, g2) in multi_indices(order) {
        let mut df = f.clone();
        for _ in 0..g1 {
            df = df.d_xi(1, ctx);
        }
        for _ in 0..g2 {
            df = df.d_xi(2, ctx);
        }
        if df.is_empty() {
            continue;
        }
        let mut dg = g.clone();
        for _ in 0..g1 {
            dg = dg.twisted_d(1, ctx);
        }
        for _ in 0..g2 {
            dg = dg.twisted_d(2, ctx);
        }
        let c = 1.0 / (factorial(g1) * factorial(g2));
        out = out.add(&df.mul(&dg).scale(C64::new(c, 0.0)));
    }
    out
}

/// `Σ_{|γ|≤M} (1/γ!) ∂_ξ^γ δ^γ (f*)`.
pub fn adjoint_symbol(f: &SymbolExpr, order: u32, ctx: &SymbolContext) -> SymbolExpr {
    let fs = f.star();
    let mut out = SymbolExpr::zero();
    for (g1, g2) in multi_indices(order) {
        let mut t = fs.clone();
        for _ in 0..g1 {
            t = t.delta(1, ctx).d_xi(1, ctx);
        }
        for _ in 0..g2 {
            t = t.delta(2, ctx).d_xi(2, ctx);
        }
        out = out.add(&t.scale(C64::new(1.0 / (factorial(g1) * factorial(g2)), 0.0)));
    }
    out
}

/// Second-order multiplier `k²|η|² + ρ₁η̄ + ρ₂η + a₀`.
#[derive(Clone, Debug)]
pub struct DiffMultiplier {
    pub k2: TorusElement,
    pub rho1: TorusElement,
    pub rho2: TorusElement,
    pub a0: TorusElement,
}

fn require_positive(k2: &TorusElement) -> Result<()> {
    k2.require_self_adjoint()?;
    // necessary condition only: the compressed spectrum sits inside the true one
    let r = k2.support_radius().max(1);
    let t = GnsTruncation::new((2 * r + 2).min(10))?;
    let sp = Spectral::of(&represent(k2, t))?;
    if !(sp.values[0] > 0.0) {
        return Err(Error::NonPositive(format!("k² has spectrum down to {:.3e}", sp.values[0])));
    }
    Ok(())
}

/// `a₂ = k²|η|²`, `a₁ = ε₁ δ_τ(k²) η̄ + ε₂ δ_τ*(k²) η`, `a₀`.
pub fn conformal_p(k2: &TorusElement, eps1: f64, eps2: f64, a0: &TorusElement) -> Result<DiffMultiplier> {
    require_positive(k2)?;
    Ok(DiffMultiplier {
        k2: k2.clone(),
        rho1: k2.delta_tau().scale_re(eps1),
        rho2: k2.delta_tau_star().scale_re(eps2),
        a0: a0.clone(),
    })
}

/// Symbol of `k δ_τ δ_τ* k` with `k = e^{h/2}`: `ρ₁ = k δ_τ(k)`,
/// `ρ₂ = k δ_τ*(k)`, `a₀ = k △(k)`.
pub fn conformal_laplacian_multiplier(h: &TorusElement, trunc: GnsTruncation) -> Result<DiffMultiplier> {
    let ctx = ModularCalcContext::new(h, trunc, CalcMethod::Auto)?;
    let clean = |e: TorusElement| TorusElement::from_coeffs(*e.params(), e.iter().filter(|(_, c)| c.norm() > 1e-17).map(|(ix, c)| ((ix.m, ix.n), c)));
    let k = clean(ctx.fn_of_h(|x| (0.5 * x).exp())?.element);
    let k2 = clean(ctx.fn_of_h(f64::exp)?.element);
    let p = *h.params();
    let lapk = k.map_multiplier(|m, n| C64::new(p.laplace_multiplier(m, n), 0.0));
    Ok(DiffMultiplier { rho1: k.multiply(&k.delta_tau())?, rho2: k.multiply(&k.delta_tau_star())?, a0: k.multiply(&lapk)?, k2 })
}

/// Homogeneous parts `(a₂, a₁, a₀)` of a multiplier as symbol expressions.
pub struct SymbolParts {
    pub a2: SymbolExpr,
    pub a1: SymbolExpr,
    pub a0: SymbolExpr,
}

impl DiffMultiplier {
    /// A context with `k²` as resolvent coefficient and the parts of `P`.
    pub fn symbol(&self, twist: TwistData) -> (SymbolContext, SymbolParts) {
        let mut ctx = SymbolContext::new(&self.k2, twist);
        let p = *self.k2.params();
        let r1 = ctx.register(&self.rho1);
        let r2 = ctx.register(&self.rho2);
        let a0 = ctx.register(&self.a0);
        let k2 = ctx.k2_atom();
        let a2 = SymbolExpr::from_term(Poly::eta_sq(&p), vec![Factor::A(k2)]);
        let mut a1 = SymbolExpr::zero();
        if !self.rho1.is_empty() {
            a1 = a1.add(&SymbolExpr::from_term(Poly::eta_bar(&p), vec![Factor::A(r1)]));
        }
        if !self.rho2.is_empty() {
            a1 = a1.add(&SymbolExpr::from_term(Poly::eta(&p), vec![Factor::A(r2)]));
        }
        let a0 = if self.a0.is_empty() { SymbolExpr::zero() } else { SymbolExpr::atom(a0) };
        (ctx, SymbolParts { a2, a1, a0 })
    }
}

impl SymbolParts {
    /// `σ(P − λ)`.
    pub fn full_minus_lambda(&self) -> SymbolExpr {
        self.a2.add(&self.a1).add(&self.a0).sub(&SymbolExpr::lambda())
    }

    fn part(&self, k: usize) -> &SymbolExpr {
        match k {
            0 => &self.a2,
            1 => &self.a1,
            _ => &self.a0,
        }
    }
}

/// The parametrix terms `b₋₂, b₋₃, …` of `(P − λ)^{-1}`, solving
/// `σ(P − λ) ∘ Σ b = 1` order by order.
pub fn resolvent_parametrix(parts: &SymbolParts, depth: usize, ctx: &SymbolContext) -> Vec<SymbolExpr> {
    let b = SymbolExpr::resolvent();
    let mut out = vec![b.clone()];
    for j in 1..depth {
        let mut acc = SymbolExpr::zero();
        for k in 0..=j.min(2) {
            for l in 0..=j - k {
                let g = (j - k - l) as u32;
                if k == 0 && g == 0 {
                    continue;
                }
                for (g1, g2) in multi_indices(g).into_iter().filter(|(a, c)| a + c == g) {
                    let mut da = parts.part(k).clone();
                    for _ in 0..g1 {
                        da = da.d_xi(1, ctx);
                    }
                    for _ in 0..g2 {
                        da = da.d_xi(2, ctx);
                    }
                    if da.is_empty() {
                        continue;
                    }
                    let mut db = out[l].clone();
                    for _ in 0..g1 {
                        db = db.twisted_d(1, ctx);
                    }
                    for _ in 0..g2 {
                        db = db.twisted_d(2, ctx);
                    }
                    let c = 1.0 / (factorial(g1) * factorial(g2));
                    acc = acc.add(&da.mul(&db).scale(C64::new(c, 0.0)));
                }
            }
        }
        out.push(b.mul(&acc).scale(C64::new(-1.0, 0.0)));
    }
    out
}

/// Evaluates symbol expressions on the truncated GNS space, applied to `1`.
pub struct SymbolEvaluator<'a> {
    ctx: &'a SymbolContext,
    trunc: GnsTruncation,
    spectral: Spectral,
    ops: RefCell<HashMap<Atom, LeftMul>>,
}

impl<'a> SymbolEvaluator<'a> {
    pub fn new(ctx: &'a SymbolContext, trunc: GnsTruncation) -> Result<Self> {
        let k2 = &ctx.bases[ctx.k2 as usize];
        let spectral = Spectral::of(&represent(k2, trunc))?;
        if !(spectral.values[0] > 0.0) {
            return Err(Error::NonPositive(format!("k² has spectrum down to {:.3e}", spectral.values[0])));
        }
        Ok(Self { ctx, trunc, spectral, ops: RefCell::new(HashMap::new()) })
    }

    pub fn trunc(&self) -> GnsTruncation {
        self.trunc
    }

    fn apply_factor(&self, f: Factor, v: &[C64], e: f64, lambda: f64) -> Result<Vec<C64>> {
        match f {
            Factor::B => {
                let lo = self.spectral.values[0] * e - lambda;
                if !(lo.abs() > 1e-300) {
                    return Err(Error::Invertibility);
                }
                Ok(self.spectral.apply_fn(|x| C64::new(1.0 / (x * e - lambda), 0.0), v))
            }
            Factor::A(a) => {
                let mut ops = self.ops.borrow_mut();
                let op = ops.entry(a).or_insert_with(|| LeftMul::new(&self.ctx.element(a), self.trunc));
                Ok(op.apply(v))
            }
        }
    }

    /// `w · 1` for every word of `expr`, at `|η|² = e`.
    pub fn word_vectors(&self, expr: &SymbolExpr, e: f64, lambda: f64) -> Result<HashMap<Word, Vec<C64>>> {
        let mut memo: HashMap<Word, Vec<C64>> = HashMap::new();
        let mut e0 = vec![ZERO; self.trunc.dim()];
        e0[self.trunc.origin()] = ONE;
        memo.insert(vec![], e0);
        for w in expr.terms.keys() {
            for start in (0..w.len()).rev() {
                let suffix = &w[start..];
                if memo.contains_key(suffix) {
                    continue;
                }
                let v = self.apply_factor(suffix[0], &memo[&suffix[1..]], e, lambda)?;
                memo.insert(suffix.to_vec(), v);
            }
        }
        Ok(memo)
    }

    /// Coefficient vector of `expr(ξ, λ)`.
    pub fn eval_vector(&self, expr: &SymbolExpr, xi: [f64; 2], lambda: f64) -> Result<Vec<C64>> {
        let e = Poly::eta_sq(&self.ctx.params).eval(xi, 0.0).re;
        let memo = self.word_vectors(expr, e, lambda)?;
        let mut out = vec![ZERO; self.trunc.dim()];
        for (w, p) in &expr.terms {
            let c = p.eval(xi, lambda);
            out.iter_mut().zip(&memo[w]).for_each(|(o, v)| *o += c * v);
        }
        Ok(out)
    }

    pub fn eval(&self, expr: &SymbolExpr, xi: [f64; 2], lambda: f64) -> Result<TorusElement> {
        Ok(self.trunc.vector_to_element(self.ctx.params, &self.eval_vector(expr, xi, lambda)?))
    }
}

fn vec_norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Declared versus measured homogeneity of one symbol term.
#[derive(Clone, Debug, Serialize)]
pub struct HomogeneityCheck {
    pub name: String,
    pub declared: Option<i32>,
    /// `log₂(‖e(2ξ, 4λ)‖ / ‖e(ξ, λ)‖)`.
    pub measured: f64,
    /// `max_r ‖e(rξ, r²λ) − r^d e(ξ, λ)‖ / ‖r^d e(ξ, λ)‖` over `r ∈ {2, 3}`.
    pub residual: f64,
}

pub fn check_homogeneity(ev: &SymbolEvaluator, name: &str, expr: &SymbolExpr, xi: [f64; 2], lambda: f64) -> Result<HomogeneityCheck> {
    let base = ev.eval_vector(expr, xi, lambda)?;
    let n0 = vec_norm(&base);
    let declared = expr.homogeneity();
    let mut residual = 0.0f64;
    let mut measured = f64::NAN;
    for r in [2.0f64, 3.0] {
        let v = ev.eval_vector(expr, [r * xi[0], r * xi[1]], r * r * lambda)?;
        if r == 2.0 && n0 > 0.0 {
            measured = (vec_norm(&v) / n0).log2();
        }
        if let Some(d) = declared {
            let s = r.powi(d);
            let diff: Vec<C64> = v.iter().zip(&base).map(|(a, b)| a - b * s).collect();
            residual = residual.max(vec_norm(&diff) / (s * n0).max(f64::MIN_POSITIVE));
        } else {
            residual = f64::INFINITY;
        }
    }
    Ok(HomogeneityCheck { name: name.to_string(), declared, measured, residual })
}

/// Quadrature settings for the `ξ`-integral.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuadratureConfig {
    pub angles: usize,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self { angles: 32, abs_tol: 1e-11, rel_tol: 1e-10, max_intervals: 400 }
    }
}

/// `∫ b₋₄(ξ, −1) dξ` applied to `1`, paired with probes.
#[derive(Clone, Debug, Serialize)]
pub struct A2Integral {
    pub values: Vec<f64>,
    pub quadrature_error: f64,
    pub intervals: usize,
    pub evaluations: usize,
    /// Largest coefficient of the integrated element on the outer ring.
    pub truncation_residual: f64,
}

/// `a₂(P, a) = s·m ∫_{ℝ²} φ₀(a · b₋₄(ξ, −1)) dξ` for each probe `a`, with
/// sign `s` and measure factor `m`.
///
/// The integral is taken in polar coordinates of `η`, `dξ = d²η / Im τ`,
/// with the radius compactified as `ρ = u/(1−u)`. Every word depends on `ξ`
/// through `|η|²` only, so word vectors are computed once per radius and the
/// angular trapezoid sum acts on the scalar polynomials.
pub fn a2_by_integration(
    ev: &SymbolEvaluator,
    b4: &SymbolExpr,
    probes: &[TorusElement],
    quad: &QuadratureConfig,
    sign: f64,
    measure: f64,
) -> Result<A2Integral> {
    let params = ev.ctx.params;
    let trunc = ev.trunc;
    let d = trunc.dim();
    let k = quad.angles.max(4);
    let tb = params.tau;
    let xi_of = |rho: f64, phi: f64| -> [f64; 2] {
        let eta = C64::from_polar(rho, phi);
        let x2 = -eta.im / tb.im;
        [eta.re - tb.re * x2, x2]
    };
    let mut failure: Option<Error> = None;
    let integrand = |u: f64| -> Vec<f64> {
        let mut out = vec![0.0; 2 * d];
        if failure.is_some() {
            return out;
        }
        let rho = u / (1.0 - u);
        let jac = 1.0 / ((1.0 - u) * (1.0 - u));
        let memo = match ev.word_vectors(b4, rho * rho, -1.0) {
            Ok(m) => m,
            Err(e) => {
                failure = Some(e);
                return out;
            }
        };
        let w = rho * jac / tb.im * 2.0 * PI / k as f64;
        for (word, p) in &b4.terms {
            let mut c = ZERO;
            for a in 0..k {
                let phi = 2.0 * PI * (a as f64 + 0.5) / k as f64;
                c += p.eval(xi_of(rho, phi), -1.0);
            }
            let c = c * w;
            for (i, v) in memo[word].iter().enumerate() {
                let z = c * v;
                out[2 * i] += z.re;
                out[2 * i + 1] += z.im;
            }
        }
        out
    };
    let res = adaptive_gk15(integrand, 0.0, 1.0, quad.abs_tol, quad.rel_tol, quad.max_intervals);
    if let Some(e) = failure {
        return Err(e);
    }
    let tol = quad.abs_tol.max(quad.rel_tol * res.value.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    if res.error > 10.0 * tol {
        return Err(Error::Quadrature { estimate: res.error, tolerance: tol });
    }
    let v: Vec<C64> = (0..d).map(|i| C64::new(res.value[2 * i], res.value[2 * i + 1]) * (sign * measure)).collect();
    let values = probes.iter().map(|a| LeftMul::new(a, trunc).apply(&v)[trunc.origin()].re).collect();
    Ok(A2Integral {
        values,
        quadrature_error: res.error * measure,
        intervals: res.intervals,
        evaluations: res.evaluations,
        truncation_residual: trunc.ring_mass(&v),
    })
}

/// Full pipeline: parametrix of `P`, homogeneity certificates, and
/// `a₂(P, a)` for each probe under the given conventions.
#[derive(Clone, Debug, Serialize)]
pub struct ParametrixA2 {
    pub integral: A2Integral,
    pub homogeneity: Vec<HomogeneityCheck>,
    pub terms: [usize; 3],
}

pub fn parametrix_a2(
    p: &DiffMultiplier,
    probes: &[TorusElement],
    trunc: GnsTruncation,
    quad: &QuadratureConfig,
    sign: f64,
    measure: f64,
) -> Result<ParametrixA2> {
    let (ctx, parts) = p.symbol(TwistData::untwisted());
    let b = resolvent_parametrix(&parts, 3, &ctx);
    let ev = SymbolEvaluator::new(&ctx, trunc)?;
    let mut homogeneity = Vec::new();
    for (name, e) in ["b-2", "b-3", "b-4"].iter().zip(&b) {
        if !e.is_empty() {
            homogeneity.push(check_homogeneity(&ev, name, e, [0.7, 0.4], -1.3)?);
        }
    }
    let integral = a2_by_integration(&ev, &b[2], probes, quad, sign, measure)?;
    Ok(ParametrixA2 { integral, homogeneity, terms: [b[0].len(), b[1].len(), b[2].len()] })
}

/// Uniform periodic grid on `[-L, L)²` with `G` points per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Grid2 {
    pub half_width: f64,
    pub points: usize,
}

impl Grid2 {
    pub fn new(half_width: f64, points: usize) -> Result<Self> {
        if !(half_width > 0.0) || points < 8 || !points.is_multiple_of(2) {
            return Err(Error::GridInsufficient(format!("grid L = {half_width}, G = {points}")));
        }
        Ok(Self { half_width, points })
    }

    pub fn x(&self, k: usize) -> f64 {
        -self.half_width + 2.0 * self.half_width * k as f64 / self.points as f64
    }

    pub fn len(&self) -> usize {
        self.points * self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points == 0
    }

    fn wavenumber(&self, k: usize) -> f64 {
        let g = self.points as i64;
        let kk = if (k as i64) < g / 2 { k as i64 } else { k as i64 - g };
        PI / self.half_width * kk as f64
    }
}

/// Sampled `A_θ`-valued function `x ↦ Σ u_{mn}(x) U^{mn}`.
#[derive(Clone, Debug)]
pub struct GridFunction {
    pub params: AlgebraParams,
    pub grid: Grid2,
    pub comps: BTreeMap<(i64, i64), Vec<C64>>,
}

impl GridFunction {
    pub fn scalar(params: AlgebraParams, grid: Grid2, f: impl Fn(f64, f64) -> C64) -> Self {
        let mut comps = BTreeMap::new();
        comps.insert((0, 0), sample(grid, f));
        Self { params, grid, comps }
    }

    pub fn from_components(params: AlgebraParams, grid: Grid2, comps: Vec<((i64, i64), Box<dyn Fn(f64, f64) -> C64>)>) -> Self {
        let comps = comps.into_iter().map(|(k, f)| (k, sample(grid, f))).collect();
        Self { params, grid, comps }
    }

    fn zero_like(&self) -> Self {
        Self { params: self.params, grid: self.grid, comps: BTreeMap::new() }
    }

    fn accumulate(&mut self, key: (i64, i64), v: &[C64], s: C64) {
        let slot = self.comps.entry(key).or_insert_with(|| vec![ZERO; v.len()]);
        slot.iter_mut().zip(v).for_each(|(a, b)| *a += s * b);
    }

    pub fn add(&self, o: &Self, s: C64) -> Self {
        let mut r = self.clone();
        for (&k, v) in &o.comps {
            r.accumulate(k, v, s);
        }
        r
    }

    pub fn scale(&self, s: C64) -> Self {
        self.zero_like().add(self, s)
    }

    /// `max_x Σ |u_{mn}(x)|`-type sup over components.
    pub fn sup_norm(&self) -> f64 {
        self.comps.values().flat_map(|v| v.iter().map(|z| z.norm())).fold(0.0, f64::max)
    }

    pub fn distance(&self, o: &Self) -> f64 {
        self.add(o, C64::new(-1.0, 0.0)).sup_norm()
    }

    /// Pointwise multiplication by a scalar function of `x`.
    pub fn mul_fn(&self, f: impl Fn(f64, f64) -> C64) -> Self {
        let w = sample(self.grid, f);
        let mut r = self.zero_like();
        for (&k, v) in &self.comps {
            r.comps.insert(k, v.iter().zip(&w).map(|(a, b)| a * b).collect());
        }
        r
    }

    /// `x ↦ α_{−x}(a) · u(x)`, with `α_{−x}(U^{pq}) = e^{i(x₁p + x₂q)} U^{pq}`.
    pub fn left_alpha(&self, a: &TorusElement) -> Self {
        let g = self.grid;
        let mut r = self.zero_like();
        for (ix, c) in a.iter() {
            let (p, q) = (ix.m, ix.n);
            let w = sample(g, |x1, x2| c * C64::from_polar(1.0, x1 * p as f64 + x2 * q as f64));
            for (&(m, n), v) in &self.comps {
                let ph = self.params.phase(q * m);
                let prod: Vec<C64> = v.iter().zip(&w).map(|(a, b)| a * b).collect();
                r.accumulate((p + m, q + n), &prod, ph);
            }
        }
        r
    }

    /// Spectral `∂/∂x_j`, rejecting under-resolved input.
    pub fn deriv(&self, j: usize, tail_tol: f64) -> Result<Self> {
        let mut r = self.zero_like();
        for (&k, v) in &self.comps {
            r.comps.insert(k, spectral_deriv(self.grid, v, j, tail_tol)?);
        }
        Ok(r)
    }
}

fn sample(grid: Grid2, f: impl Fn(f64, f64) -> C64) -> Vec<C64> {
    let g = grid.points;
    let mut out = Vec::with_capacity(g * g);
    for a in 0..g {
        for b in 0..g {
            out.push(f(grid.x(a), grid.x(b)));
        }
    }
    out
}

fn fft_pair(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    let mut planner = FftPlanner::new();
    (planner.plan_fft_forward(n), planner.plan_fft_inverse(n))
}

fn spectral_deriv(grid: Grid2, v: &[C64], axis: usize, tail_tol: f64) -> Result<Vec<C64>> {
    let g = grid.points;
    let (fwd, inv) = fft_pair(g);
    let mut out = v.to_vec();
    let mut line = vec![ZERO; g];
    let scale = 1.0 / g as f64;
    let mut peak = 0.0f64;
    let mut tail = 0.0f64;
    for o in 0..g {
        for k in 0..g {
            line[k] = if axis == 1 { v[k * g + o] } else { v[o * g + k] };
        }
        fwd.process(&mut line);
        for (k, z) in line.iter_mut().enumerate() {
            let kk = if k < g / 2 { k } else { g - k };
            peak = peak.max(z.norm());
            if kk > 3 * g / 8 {
                tail = tail.max(z.norm());
            }
            let w = if k == g / 2 { 0.0 } else { grid.wavenumber(k) };
            *z *= I * w * scale;
        }
        inv.process(&mut line);
        for k in 0..g {
            if axis == 1 {
                out[k * g + o] = line[k];
            } else {
                out[o * g + k] = line[k];
            }
        }
    }
    if peak > 0.0 && tail / peak > tail_tol {
        return Err(Error::Aliasing { tail: tail / peak, tolerance: tail_tol });
    }
    Ok(out)
}

/// Default relative spectral-tail tolerance for grid derivatives.
pub const TAIL_TOL: f64 = 1e-10;

/// `ud^γ u(x) = Σ_{β≤γ} C(γ,β) (Bx)^{γ−β} (1/i)^{|β|} ∂^β u(x)`.
pub fn ud_apply(twist: &TwistData, gamma: (u32, u32), u: &GridFunction) -> Result<GridFunction> {
    let b = twist.b;
    let binom = |n: u32, k: u32| factorial(n) / (factorial(k) * factorial(n - k));
    let mut out = u.zero_like();
    let mut d1 = u.clone();
    for b1 in 0..=gamma.0 {
        let mut d12 = d1.clone();
        for b2 in 0..=gamma.1 {
            let coef = binom(gamma.0, b1) * binom(gamma.1, b2);
            let ipow = (-I).powu(b1 + b2);
            let (e1, e2) = (gamma.0 - b1, gamma.1 - b2);
            let term = d12.mul_fn(|x1, x2| {
                let bx1 = b[0][0] * x1 + b[0][1] * x2;
                let bx2 = b[1][0] * x1 + b[1][1] * x2;
                C64::new(coef * bx1.powi(e1 as i32) * bx2.powi(e2 as i32), 0.0) * ipow
            });
            out = out.add(&term, ONE);
            if b2 < gamma.1 {
                d12 = d12.deriv(2, TAIL_TOL)?;
            }
        }
        if b1 < gamma.0 {
            d1 = d1.deriv(1, TAIL_TOL)?;
        }
    }
    Ok(out)
}

/// `ud_j ud_k u` from the explicit second-order expansion
/// `−∂_j∂_k − i b_{js}x_s∂_k − i b_{ks}x_s∂_j − i b_{kj} + b_{js}b_{kr}x_s x_r`.
pub fn ud_pair_expansion(twist: &TwistData, j: usize, k: usize, u: &GridFunction) -> Result<GridFunction> {
    let b = twist.b;
    let (j, k) = (j - 1, k - 1);
    let dk = u.deriv(k + 1, TAIL_TOL)?;
    let dj = u.deriv(j + 1, TAIL_TOL)?;
    let djk = dk.deriv(j + 1, TAIL_TOL)?;
    let bx = move |r: usize, x1: f64, x2: f64| b[r][0] * x1 + b[r][1] * x2;
    let mut out = djk.scale(C64::new(-1.0, 0.0));
    out = out.add(&dk.mul_fn(|x1, x2| -I * bx(j, x1, x2)), ONE);
    out = out.add(&dj.mul_fn(|x1, x2| -I * bx(k, x1, x2)), ONE);
    out = out.add(u, -I * b[k][j]);
    out = out.add(&u.mul_fn(|x1, x2| C64::new(bx(j, x1, x2) * bx(k, x1, x2), 0.0)), ONE);
    Ok(out)
}

/// `P_f u` for a differential symbol: `Σ α_{−x}(a_γ) ud^γ u`.
pub fn op_apply(expr: &SymbolExpr, ctx: &SymbolContext, u: &GridFunction) -> Result<GridFunction> {
    if !expr.is_differential() {
        return Err(Error::Unsupported("operator application needs a polynomial symbol".into()));
    }
    let mut out = u.zero_like();
    for (w, p) in &expr.terms {
        let mut a = TorusElement::one(ctx.params);
        for f in w {
            if let Factor::A(at) = f {
                a = a.multiply(&ctx.element(*at))?;
            }
        }
        for (m, c) in p.terms() {
            if m[2] != 0 {
                return Err(Error::Unsupported("λ-dependent symbol".into()));
            }
            let v = ud_apply(&ctx.twist, (m[0] as u32, m[1] as u32), u)?;
            out = out.add(&v.left_alpha(&a.scale(c)), ONE);
        }
    }
    Ok(out)
}
