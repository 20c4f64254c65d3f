//! Quadrature rules: cached Gauss–Legendre and adaptive Gauss–Kronrod (7–15)
//! for vector-valued integrands.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use gauss_quad::legendre::GaussLegendre;

type Rule = (&'static [f64], &'static [f64]);

/// Gauss–Legendre nodes and weights on `[-1, 1]`, cached per degree.
pub fn gauss_legendre(n: usize) -> Rule {
    static CACHE: OnceLock<Mutex<HashMap<usize, Rule>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("quadrature cache poisoned");
    *guard.entry(n).or_insert_with(|| {
        let rule = GaussLegendre::new(n.max(2)).expect("degree >= 2");
        let (x, w): (Vec<f64>, Vec<f64>) = rule.into_node_weight_pairs().into_iter().unzip();
        (Box::leak(x.into_boxed_slice()), Box::leak(w.into_boxed_slice()))
    })
}

// Kronrod 15-point nodes (nonnegative half) and weights, with the embedded
// 7-point Gauss weights (QUADPACK qk15 table).
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15<F: FnMut(f64) -> Vec<f64>>(f: &mut F, a: f64, b: f64) -> (Vec<f64>, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let dim = fc.len();
    let mut kron: Vec<f64> = fc.iter().map(|v| v * WGK[7]).collect();
    let mut gauss: Vec<f64> = fc.iter().map(|v| v * WG[3]).collect();
    for j in 0..7 {
        let dx = h * XGK[j];
        let f1 = f(c - dx);
        let f2 = f(c + dx);
        for k in 0..dim {
            let s = f1[k] + f2[k];
            kron[k] += WGK[j] * s;
            if j % 2 == 1 {
                gauss[k] += WG[j / 2] * s;
            }
        }
    }
    let mut err = 0.0f64;
    for k in 0..dim {
        kron[k] *= h;
        gauss[k] *= h;
        err = err.max((kron[k] - gauss[k]).abs());
    }
    (kron, err)
}

/// Result of an adaptive integration.
#[derive(Clone, Debug)]
pub struct AdaptiveResult {
    pub value: Vec<f64>,
    pub error: f64,
    pub intervals: usize,
    pub evaluations: usize,
}

/// Adaptive Gauss–Kronrod integration of a vector-valued function on `[a, b]`.
/// The error is the max-norm of the Kronrod–Gauss differences summed over
/// subintervals; bisection continues until it falls below
/// `max(abs_tol, rel_tol·‖I‖∞)` or `max_intervals` is reached.
pub fn adaptive_gk15<F: FnMut(f64) -> Vec<f64>>(mut f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64, max_intervals: usize) -> AdaptiveResult {
    let mut evaluations = 15;
    let (v, e) = gk15(&mut f, a, b);
    let mut pieces = vec![(a, b, v, e)];
    loop {
        let dim = pieces[0].2.len();
        let mut total = vec![0.0; dim];
        let mut err = 0.0;
        for p in &pieces {
            for k in 0..dim {
                total[k] += p.2[k];
            }
            err += p.3;
        }
        let scale = total.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if err <= abs_tol.max(rel_tol * scale) || pieces.len() >= max_intervals {
            return AdaptiveResult { value: total, error: err, intervals: pieces.len(), evaluations };
        }
        let worst = pieces
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.partial_cmp(&y.1 .3).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let (lo, hi, _, _) = pieces.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gk15(&mut f, lo, mid);
        let (v2, e2) = gk15(&mut f, mid, hi);
        evaluations += 30;
        pieces.push((lo, mid, v1, e1));
        pieces.push((mid, hi, v2, e2));
    }
}
