use std::f64::consts::PI;

use modcurv::curvature::Conventions;
use modcurv::error::Error;
use modcurv::gns::GnsTruncation;
use modcurv::heisenberg::*;
use modcurv::nctorus::{AlgebraParams, TorusElement};
use num_complex::Complex64 as C64;

mod common;
use common::oscillator_oracle;

fn params(c: i64) -> HeisenbergParams {
    let p = AlgebraParams::standard();
    HeisenbergParams::new([1, 0, c, 1], p.theta, p.tau).unwrap()
}

#[test]
fn module_spectrum_matches_independent_oscillator() {
    for c in [1i64, 2] {
        let grid = HeisenbergGrid::new(12.0, 256).unwrap();
        let module = params(c).inverse().unwrap();
        let ops = ModuleOperators::new(module, grid).unwrap();
        let got = flat_spectrum(&ops, 12 * c as usize).unwrap();
        let oracle = oscillator_oracle(&module, grid);
        let om = ladder_spacing(&module);
        for (k, v) in got.iter().enumerate() {
            let level = k / c as usize;
            assert!((v - oracle[level]).abs() < 1e-6 * om, "c={c} k={k}: {v} vs {}", oracle[level]);
            if level < 6 {
                assert!((v - om * level as f64).abs() < 1e-6 * om, "c={c} ladder level {level}");
            }
        }
    }
}

#[test]
fn flat_heat_trace_is_reproduced() {
    let ops = ModuleOperators::new(params(1).inverse().unwrap(), HeisenbergGrid::default()).unwrap();
    let r = flat_heat_check(&ops, &ModuleFitConfig::default()).unwrap();
    assert!(r.trace_deviation < 1e-8, "{r:?}");
    assert!((r.fitted_a2 - r.exact_a2).abs() < 1e-3, "{r:?}");
    assert!((r.fitted_a0 / r.exact_a0 - 1.0).abs() < 1e-3, "{r:?}");
}

#[test]
fn parameter_validation() {
    let p = AlgebraParams::standard();
    assert!(matches!(HeisenbergParams::new([1, 1, 1, 1], p.theta, p.tau), Err(Error::InvalidParams(_))));
    assert!(matches!(HeisenbergParams::new([1, 3, 0, 1], p.theta, p.tau), Err(Error::TrivialBimodule)));
    let hp = HeisenbergParams::new([2, 1, 3, 2], p.theta, p.tau).unwrap();
    assert_eq!(hp.components(), 3);
    assert!((hp.rank - (3.0 * p.theta + 2.0)).abs() < 1e-15);
    let back = hp.inverse().unwrap();
    assert!((back.theta_prime - p.theta).abs() < 1e-12);
    assert_eq!(back.g, [2, -1, -3, 2]);
}

#[test]
fn relations_hold_on_gaussian_sections() {
    let hp = params(2);
    let grid = HeisenbergGrid::default();
    let f = HeisenbergSection::gaussian(hp, grid, 0.7, 0.3, 1);
    let e = C64::from_polar(1.0, 2.0 * PI * hp.theta);
    let u1u2 = act_right(&act_right(&f, RightGen::U1, false).unwrap(), RightGen::U2, false).unwrap();
    let u2u1 = act_right(&act_right(&f, RightGen::U2, false).unwrap(), RightGen::U1, false).unwrap();
    assert!(u2u1.distance(&u1u2.scale(e)) < 1e-8 * f.sup_norm());
    let ep = C64::from_polar(1.0, 2.0 * PI * hp.theta_prime);
    let v1v2 = act_left(LeftGen::V1, &act_left(LeftGen::V2, &f, false).unwrap(), false).unwrap();
    let v2v1 = act_left(LeftGen::V2, &act_left(LeftGen::V1, &f, false).unwrap(), false).unwrap();
    let ok = v2v1.distance(&v1v2.scale(ep)) < 1e-8 || v1v2.distance(&v2v1.scale(ep)) < 1e-8;
    assert!(ok);
}

#[test]
fn morita_transfer_of_curvature() {
    let p = AlgebraParams::standard();
    let h = TorusElement::hermitian_from(
        p,
        [((1, 0), C64::new(0.12, 0.0)), ((0, 1), C64::new(0.08, 0.03)), ((1, 1), C64::new(0.05, 0.0))],
    );
    let probes = vec![
        ("1".to_string(), TorusElement::one(p)),
        ("U1+U1*".to_string(), TorusElement::hermitian_from(p, [((1, 0), C64::new(1.0, 0.0))])),
    ];
    let r = morita_curvature_check(
        &h,
        &params(1),
        HeisenbergGrid::default(),
        &probes,
        &ModuleFitConfig::default(),
        &Conventions::default(),
        GnsTruncation::new(12).unwrap(),
    )
    .unwrap();
    assert!((r.trace_factor - (p.theta + 1.0)).abs() < 1e-12);
    assert!(r.max_relative_deviation < 0.1, "{:?}", r.probes.iter().map(|q| q.relative_deviation).collect::<Vec<_>>());
}
