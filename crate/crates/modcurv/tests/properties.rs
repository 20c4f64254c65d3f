use modcurv::curvature::f_value;
use modcurv::gns::{laplacian, GnsTruncation, HeatTrace, LaplacianKind, Spectral};
use modcurv::heisenberg::{
    act_left, act_right, inner_cutoff, inner_product_check, HeisenbergGrid, HeisenbergParams, HeisenbergSection,
    LeftGen, RightGen,
};
use modcurv::lab::{run_suite, ExperimentConfig, SuiteName};
use modcurv::modfunc::calc::{CalcMethod, ModularCalcContext};
use modcurv::modfunc::kernels::{CurvatureKernel, KernelKind};
use modcurv::nctorus::{AlgebraParams, TorusElement};
use modcurv::psymbol::{
    compose_symbols, op_apply, ud_apply, Grid2, GridFunction, SymbolContext, SymbolExpr, TwistData,
};
use num_complex::Complex64 as C64;
use proptest::prelude::*;

fn p() -> AlgebraParams {
    AlgebraParams::standard()
}

fn element(radius: i64) -> impl Strategy<Value = TorusElement> {
    let side = (2 * radius + 1) as usize;
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), side * side).prop_map(move |v| {
        TorusElement::from_coeffs(
            p(),
            v.into_iter().enumerate().map(|(i, (re, im))| {
                (((i / side) as i64 - radius, (i % side) as i64 - radius), C64::new(re, im))
            }),
        )
    })
}

fn self_adjoint(radius: i64, l1: f64) -> impl Strategy<Value = TorusElement> {
    element(radius).prop_filter_map("scalar", move |x| {
        let h = &x + &x.star();
        let h = TorusElement::from_coeffs(p(), h.iter().filter(|(ix, _)| (ix.m, ix.n) != (0, 0)).map(|(ix, c)| ((ix.m, ix.n), c)));
        let n = h.l1_norm();
        (n > 1e-3).then(|| h.scale_re(l1 / n))
    })
}

fn rel(a: &TorusElement, b: &TorusElement) -> f64 {
    a.distance(b) / a.l1_norm().max(b.l1_norm()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn associativity_and_star(a in element(2), b in element(2), c in element(1)) {
        let l = a.multiply(&b).unwrap().multiply(&c).unwrap();
        let r = a.multiply(&b.multiply(&c).unwrap()).unwrap();
        prop_assert!(rel(&l, &r) < 1e-13);
        let s1 = a.multiply(&b).unwrap().star();
        let s2 = b.star().multiply(&a.star()).unwrap();
        prop_assert!(rel(&s1, &s2) < 1e-13);
    }

    #[test]
    fn trace_property(a in element(2), b in element(2)) {
        let d = (a.multiply(&b).unwrap().trace0() - b.multiply(&a).unwrap().trace0()).norm();
        prop_assert!(d < 1e-13 * a.l1_norm() * b.l1_norm());
    }

    #[test]
    fn integration_by_parts_and_leibniz(a in element(2), b in element(2), j in 1usize..=2) {
        let ibp = a.multiply(&b.derive(j)).unwrap().trace0() + a.derive(j).multiply(&b).unwrap().trace0();
        prop_assert!(ibp.norm() < 1e-13 * (1.0 + a.l1_norm() * b.l1_norm()));
        let lhs = a.multiply(&b).unwrap().derive(j);
        let rhs = &a.derive(j).multiply(&b).unwrap() + &a.multiply(&b.derive(j)).unwrap();
        prop_assert!(lhs.distance(&rhs) < 1e-13 * (1.0 + lhs.l1_norm()));
    }

    #[test]
    fn positivity(a in element(2)) {
        let t = a.star().multiply(&a).unwrap().trace0();
        prop_assert!(t.re >= 0.0 && t.im.abs() < 1e-13 * (1.0 + t.re));
        let sq: f64 = a.iter().map(|(_, c)| c.norm_sqr()).sum();
        prop_assert!((t.re - sq).abs() < 1e-12 * (1.0 + sq));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn calculus_identity_and_self_adjointness(h in self_adjoint(2, 0.5), x in self_adjoint(1, 1.0)) {
        let ctx = ModularCalcContext::new(&h, GnsTruncation::new(14).unwrap(), CalcMethod::Auto).unwrap();
        let id = ctx.apply1(|_| 1.0, &x).unwrap().element;
        prop_assert!(id.distance(&x) < 1e-10);
        let k = CurvatureKernel::new(KernelKind::K0);
        let y = ctx.apply1(|s| k.eval(s), &x).unwrap().element;
        prop_assert!(y.self_adjoint_residual() < 1e-10, "res {} k(1) {} k(-1) {}", y.self_adjoint_residual(), k.eval(1.0), k.eval(-1.0));
    }

    #[test]
    fn laplacians_are_hermitian_psd_and_traces_monotone(h in self_adjoint(1, 0.8)) {
        let t = GnsTruncation::new(5).unwrap();
        for kind in [LaplacianKind::Conformal, LaplacianKind::Forms01] {
            let l = laplacian(kind, &h, t).unwrap();
            prop_assert!(l.hermitian_residual() < 1e-10);
            let sp = Spectral::of(&l).unwrap();
            let top = sp.values.last().unwrap().abs();
            prop_assert!(sp.values[0] > -1e-10 * top);
        }
        let heat = HeatTrace::new(&laplacian(LaplacianKind::Conformal, &h, t).unwrap()).unwrap();
        let one = TorusElement::one(p());
        let mut prev = f64::INFINITY;
        for i in 1..30 {
            let v = heat.trace(&one, 0.02 * i as f64).unwrap();
            prop_assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn scale_invariance_and_flat_extremality(h in self_adjoint(1, 0.6), c in -1.0f64..1.0, eps in -0.5f64..0.5) {
        let t = GnsTruncation::new(8).unwrap();
        let f = f_value(&h, t).unwrap();
        let fc = f_value(&(&h + &TorusElement::scalar(p(), C64::new(c, 0.0))), t).unwrap();
        prop_assert!((f - fc).abs() < 1e-9);
        let f0 = f_value(&TorusElement::zero(p()), t).unwrap();
        prop_assert!(f_value(&h.scale_re(eps), t).unwrap() - f0 >= 0.0);
    }
}

fn schwartz(cx: f64, cy: f64, w: f64, a: C64) -> GridFunction {
    let grid = Grid2::new(10.0, 96).unwrap();
    GridFunction::from_components(
        p(),
        grid,
        vec![
            ((0, 0), Box::new(move |x: f64, y: f64| C64::new((-((x - cx).powi(2) + (y - cy).powi(2)) / w).exp(), 0.0))),
            ((1, -1), Box::new(move |x: f64, y: f64| a * x * (-((x * x + y * y) / w)).exp())),
        ],
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn differential_composition_on_random_samples(
        cx in -1.5f64..1.5, cy in -1.5f64..1.5, w in 1.0f64..3.0, re in -1.0f64..1.0, im in -1.0f64..1.0, b12 in -0.8f64..0.8
    ) {
        let u = schwartz(cx, cy, w, C64::new(re, im));
        let mut ctx = SymbolContext::new(&TorusElement::one(p()), TwistData::new(b12));
        let a = ctx.register(&TorusElement::from_coeffs(p(), [((1, 0), C64::new(0.5, 0.1)), ((0, 0), C64::new(0.2, 0.0))]));
        let f = SymbolExpr::atom(a).mul(&SymbolExpr::xi(2)).add(&SymbolExpr::xi(1));
        let g = SymbolExpr::xi(1).mul(&SymbolExpr::xi(2)).add(&SymbolExpr::atom(a));
        let fg = compose_symbols(&f, &g, 2, &ctx);
        let lhs = op_apply(&f, &ctx, &op_apply(&g, &ctx, &u).unwrap()).unwrap();
        let rhs = op_apply(&fg, &ctx, &u).unwrap();
        prop_assert!(lhs.distance(&rhs) < 1e-8);
    }

    #[test]
    fn untwisted_ud_is_multiplicative(cx in -1.5f64..1.5, w in 1.0f64..3.0, g1 in 0u32..2, g2 in 0u32..2, h1 in 0u32..2, h2 in 0u32..2) {
        let u = schwartz(cx, 0.3, w, C64::new(0.2, -0.4));
        let tw = TwistData::untwisted();
        let lhs = ud_apply(&tw, (g1 + h1, g2 + h2), &u).unwrap();
        let rhs = ud_apply(&tw, (g1, g2), &ud_apply(&tw, (h1, h2), &u).unwrap()).unwrap();
        prop_assert!(lhs.distance(&rhs) < 1e-12 * lhs.sup_norm().max(1.0));
    }
}

fn section(hp: HeisenbergParams, grid: HeisenbergGrid, s: f64, t0: f64, phase: f64) -> HeisenbergSection {
    HeisenbergSection::from_fn(hp, grid, move |t, al| {
        C64::from_polar(1.0 + 0.2 * al as f64, phase * t) * (-std::f64::consts::PI * s * (t - t0).powi(2)).exp()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn bimodule_axioms_and_inner_products(
        c in 1i64..=2, s1 in 0.4f64..1.2, s2 in 0.4f64..1.2, t1 in -1.0f64..1.0, t2 in -1.0f64..1.0, ph in -1.0f64..1.0
    ) {
        let hp = HeisenbergParams::new([1, 0, c, 1], p().theta, p().tau).unwrap();
        let grid = HeisenbergGrid::new(12.0, 512).unwrap();
        let f = section(hp, grid, s1, t1, ph);
        let g = section(hp, grid, s2, t2, -ph);
        for lg in [LeftGen::V1, LeftGen::V2] {
            for rg in [RightGen::U1, RightGen::U2] {
                let x = act_right(&act_left(lg, &f, false).unwrap(), rg, false).unwrap();
                let y = act_left(lg, &act_right(&f, rg, false).unwrap(), false).unwrap();
                prop_assert!(x.distance(&y) < 1e-8);
            }
        }
        let r = inner_product_check(&f, &g, &f, inner_cutoff(&hp, &grid)).unwrap();
        prop_assert!(r.residual < 1e-7 && r.imprimitivity < 1e-7, "{:?}", r);
    }
}

#[test]
fn identical_config_reproduces_reports() {
    let cfg = ExperimentConfig { random_dilatons: 2, ..ExperimentConfig::default() };
    for s in [SuiteName::Identities, SuiteName::Curvature] {
        let a = run_suite(s, &cfg).unwrap();
        let b = run_suite(s, &cfg).unwrap();
        assert_eq!(a.checks, b.checks);
        assert_eq!(a.tables.len(), b.tables.len());
        for (x, y) in a.tables.iter().zip(&b.tables) {
            assert_eq!(x.rows, y.rows);
        }
    }
}
