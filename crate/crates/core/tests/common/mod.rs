#![allow(dead_code)]

use ndarray::Array2;
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use survbal::discretize::kaplan_meier;
use survbal::model::{init_params, HyperParams, ModelParams, WeightMode};
use survbal::objective::{softplus, total_objective, Batch};
use survbal::train::gradient;

const H: f64 = 1e-4;

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, m: usize, mode: WeightMode) -> (Batch, Vec<f64>) {
    let mut t: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    t[0] = 0;
    t[1] = 1;
    let theta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.5)).collect();
    let weights = match mode {
        WeightMode::Learned => theta.iter().map(|&v| softplus(v)).collect(),
        WeightMode::Propensity => (0..n).map(|_| rng.random_range(0.3..3.0)).collect(),
        WeightMode::Uniform => vec![1.0; n],
    };
    let batch = Batch {
        x: Array2::from_shape_fn((n, d), |_| rng.random_range(-1.5..1.5)),
        k: (0..n).map(|_| rng.random_range(1..=m + 1)).collect(),
        delta: (0..n).map(|_| rng.random_range(0..2)).collect(),
        weights,
        t,
        alpha1: rng.random_range(0.3..0.7),
        mode,
    };
    (batch, theta)
}

pub fn hyper(gamma: f64, lambda_r: f64, lambda_w: f64) -> HyperParams {
    HyperParams {
        phi_width: 6,
        phi_depth: 2,
        embed_dim: Some(4),
        psi_width: 5,
        psi_depth: 1,
        gamma_wd: gamma,
        lambda_r,
        lambda_w,
        sinkhorn_max_iter: 200,
        sinkhorn_tol: 1e-13,
        ..HyperParams::default()
    }
}

pub fn objective(p: &ModelParams, b: &Batch, h: &HyperParams) -> f64 {
    total_objective(p, b, h).unwrap().total
}

/// Analytic gradient of `on - off` (isolating one term) and the matching
/// central finite differences, over model parameters then weight parameters.
pub fn compare(p: &ModelParams, b: &Batch, theta: &[f64], on: &HyperParams, off: Option<&HyperParams>) -> f64 {
    let diff_grad = |h: &HyperParams| {
        let (_, g) = gradient(p, b, h).unwrap();
        let mut v = g.params.to_flat();
        v.extend(g.weights.unwrap_or_default());
        v
    };
    let mut analytic = diff_grad(on);
    if let Some(off) = off {
        for (a, o) in analytic.iter_mut().zip(diff_grad(off)) {
            *a -= o;
        }
    }
    let value = |p: &ModelParams, b: &Batch| objective(p, b, on) - off.map_or(0.0, |o| objective(p, b, o));

    let flat = p.to_flat();
    let mut worst: f64 = 0.0;
    let mut check = |a: f64, plus: f64, minus: f64| {
        let fd = (plus - minus) / (2.0 * H);
        let scale = a.abs().max(fd.abs()).max(1e-4);
        worst = worst.max((a - fd).abs() / scale);
    };
    for i in 0..flat.len() {
        let mut q = p.clone();
        let mut v = flat.clone();
        v[i] += H;
        q.set_flat(&v).unwrap();
        let plus = value(&q, b);
        v[i] -= 2.0 * H;
        q.set_flat(&v).unwrap();
        let minus = value(&q, b);
        check(analytic[i], plus, minus);
    }
    if b.mode == WeightMode::Learned {
        for i in 0..theta.len() {
            let mut bp = b.clone();
            bp.weights[i] = softplus(theta[i] + H);
            let plus = value(p, &bp);
            bp.weights[i] = softplus(theta[i] - H);
            let minus = value(p, &bp);
            check(analytic[flat.len() + i], plus, minus);
        }
    }
    worst
}

/// Worst relative analytic-vs-finite-difference error of every term and of the
/// total, over `cases` random small configurations: `(case, term, error)`.
pub fn gradient_suite(seed: u64, cases: usize) -> Vec<(usize, &'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes = [WeightMode::Uniform, WeightMode::Propensity, WeightMode::Learned];
    let mut out = Vec::new();
    for case in 0..cases {
        let mode = modes[case % 3];
        let (d, m, n) = (3, 4, 10);
        let (batch, theta) = random_batch(&mut rng, n, d, m, mode);
        let mut p = init_params(d, m, &hyper(0.0, 0.0, 0.0), case as u64);
        // zero biases put dead-row pre-activations exactly on the ReLU kink
        for l in p.phi.iter_mut().chain(p.psi.iter_mut()) {
            l.b.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        }
        let base = hyper(0.0, 0.0, 0.0);
        out.push((case, "nll", compare(&p, &batch, &theta, &base, None)));
        out.push((case, "balance", compare(&p, &batch, &theta, &hyper(0.7, 0.0, 0.0), Some(&base))));
        out.push((case, "omega", compare(&p, &batch, &theta, &hyper(0.0, 0.3, 0.0), Some(&base))));
        out.push((case, "theta", compare(&p, &batch, &theta, &hyper(0.0, 0.0, 0.4), Some(&base))));
        out.push((case, "total", compare(&p, &batch, &theta, &hyper(0.7, 0.3, 0.4), None)));
    }
    out
}

pub type Q = Ratio<i64>;

pub fn q(n: i64, d: i64) -> Q {
    Q::new(n, d)
}

/// Product limit in exact arithmetic: `(time, at risk, events, S)` at each event time.
pub fn rational_km(time: &[i64], event: &[u8]) -> Vec<(i64, i64, i64, Q)> {
    let mut rows: Vec<(i64, u8)> = time.iter().copied().zip(event.iter().copied()).collect();
    rows.sort();
    let mut out = Vec::new();
    let mut s = q(1, 1);
    let mut at_risk = rows.len() as i64;
    let mut i = 0;
    while i < rows.len() {
        let t = rows[i].0;
        let group: Vec<_> = rows[i..].iter().take_while(|r| r.0 == t).collect();
        let d = group.iter().filter(|r| r.1 == 1).count() as i64;
        if d > 0 {
            s *= q(at_risk - d, at_risk);
            out.push((t, at_risk, d, s));
        }
        at_risk -= group.len() as i64;
        i += group.len();
    }
    out
}

pub struct Fixture {
    pub time: &'static [i64],
    pub event: &'static [u8],
    pub expected: Vec<(i64, i64, i64, Q)>,
}

pub fn fixtures() -> Vec<Fixture> {
    vec![
        Fixture {
            time: &[1, 2, 3, 4],
            event: &[1, 1, 1, 1],
            expected: vec![(1, 4, 1, q(3, 4)), (2, 3, 1, q(1, 2)), (3, 2, 1, q(1, 4)), (4, 1, 1, q(0, 1))],
        },
        Fixture {
            time: &[1, 2, 2, 3, 4, 5],
            event: &[1, 1, 0, 1, 0, 1],
            expected: vec![(1, 6, 1, q(5, 6)), (2, 5, 1, q(2, 3)), (3, 3, 1, q(4, 9)), (5, 1, 1, q(0, 1))],
        },
        Fixture {
            time: &[2, 2, 2, 5, 5, 7],
            event: &[1, 1, 0, 1, 1, 0],
            expected: vec![(2, 6, 2, q(2, 3)), (5, 3, 2, q(2, 9))],
        },
        Fixture { time: &[1, 2, 3], event: &[0, 0, 0], expected: vec![] },
        Fixture {
            time: &[3, 1, 4, 1, 5, 9, 2, 6],
            event: &[1, 0, 1, 1, 0, 1, 1, 0],
            expected: vec![
                (1, 8, 1, q(7, 8)),
                (2, 6, 1, q(35, 48)),
                (3, 5, 1, q(7, 12)),
                (4, 4, 1, q(7, 16)),
                (9, 1, 1, q(0, 1)),
            ],
        },
        Fixture { time: &[0, 0, 1], event: &[1, 0, 1], expected: vec![(0, 3, 1, q(2, 3)), (1, 1, 1, q(0, 1))] },
    ]
}

pub fn to_f64(r: Q) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Compares the float estimator with a fixture: counts exactly, the product of
/// exact factors rebuilt from those counts exactly, and the float survival to 4 ulp.
pub fn check_fixture(f: &Fixture) -> Result<(), String> {
    if rational_km(f.time, f.event) != f.expected {
        return Err("oracle disagrees with the fixture".into());
    }
    let t: Vec<f64> = f.time.iter().map(|&v| v as f64).collect();
    let km = kaplan_meier(&t, f.event).map_err(|e| e.to_string())?;
    let times: Vec<f64> = f.expected.iter().map(|e| e.0 as f64).collect();
    let risk: Vec<usize> = f.expected.iter().map(|e| e.1 as usize).collect();
    let events: Vec<usize> = f.expected.iter().map(|e| e.2 as usize).collect();
    if km.event_times != times || km.n_at_risk != risk || km.n_events != events {
        return Err(format!("counts differ: {km:?}"));
    }
    let mut s = q(1, 1);
    for (i, e) in f.expected.iter().enumerate() {
        s *= q((km.n_at_risk[i] - km.n_events[i]) as i64, km.n_at_risk[i] as i64);
        if s != e.3 {
            return Err(format!("step {i}: product {s} vs {}", e.3));
        }
        if (km.survival[i] - to_f64(e.3)).abs() > 4.0 * f64::EPSILON {
            return Err(format!("step {i}: float {} vs {}", km.survival[i], e.3));
        }
    }
    Ok(())
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.random_range(-scale..scale))
}

pub fn sq_dist(a: &Array2<f64>, i: usize, b: &Array2<f64>, j: usize) -> f64 {
    a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Exact OT between uniform clouds of equal size: the cheapest permutation.
pub fn brute_force_ot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    fn go(k: usize, perm: &mut Vec<usize>, a: &Array2<f64>, b: &Array2<f64>, best: &mut f64) {
        let n = perm.len();
        if k == n {
            let c: f64 = (0..n).map(|i| sq_dist(a, i, b, perm[i])).sum::<f64>() / n as f64;
            *best = best.min(c);
            return;
        }
        for i in k..n {
            perm.swap(k, i);
            go(k + 1, perm, a, b, best);
            perm.swap(k, i);
        }
    }
    let mut perm: Vec<usize> = (0..a.nrows()).collect();
    let mut best = f64::INFINITY;
    go(0, &mut perm, a, b, &mut best);
    best
}

