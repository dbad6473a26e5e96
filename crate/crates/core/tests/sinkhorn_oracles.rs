mod common;

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use common::{brute_force_ot, random_points};
use survbal::sinkhorn::{
    median_cost, sinkhorn_cost, sinkhorn_divergence, sinkhorn_divergence_grad, SinkhornOptions, WeightedCloud,
};

fn precise(eps: f64) -> SinkhornOptions {
    SinkhornOptions { eps, max_iter: 200_000, tol: 1e-10 }
}

#[test]
fn small_eps_cost_matches_brute_force_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for case in 0..40 {
        let n = 2 + case % 5;
        let d = 1 + case % 3;
        let x = random_points(&mut rng, n, d, 1.0);
        let y = random_points(&mut rng, n, d, 1.0);
        let exact = brute_force_ot(&x, &y);
        let c = survbal::sinkhorn::cost_matrix(&x, &y).unwrap();
        let eps = 1e-3 * median_cost(&c);
        let got = sinkhorn_cost(&WeightedCloud::uniform(x).unwrap(), &WeightedCloud::uniform(y).unwrap(), precise(eps)).unwrap();
        let rel = (got - exact).abs() / exact;
        assert!(rel < 0.02, "case {case}: sinkhorn {got} exact {exact}");
        worst = worst.max(rel);
    }
    println!("worst relative gap {worst:e}");
}

#[test]
fn translated_cloud_divergence_is_the_squared_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..10 {
        let d = 2 + case % 3;
        let x = random_points(&mut rng, 40, d, 1.0);
        let shift: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let norm2: f64 = shift.iter().map(|s| s * s).sum();
        let y = Array2::from_shape_fn(x.dim(), |(i, j)| x[[i, j]] + shift[j]);
        let eps = 0.05 * median_cost(&survbal::sinkhorn::cost_matrix(&x, &y).unwrap());
        let div =
            sinkhorn_divergence(&WeightedCloud::uniform(x).unwrap(), &WeightedCloud::uniform(y).unwrap(), precise(eps))
                .unwrap();
        assert!((div - norm2).abs() <= 0.05 * norm2, "case {case}: {div} vs {norm2}");
    }
}

#[test]
fn identical_weighted_clouds_have_zero_divergence() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for n in [1, 3, 10, 30] {
        let x = random_points(&mut rng, n, 3, 2.0);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
        let a = WeightedCloud::weighted(x, &w).unwrap();
        let div = sinkhorn_divergence(&a, &a.clone(), SinkhornOptions::new(0.1)).unwrap();
        assert!(div < 1e-6, "n {n}: {div}");
    }
}

#[test]
fn point_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let h = 1e-5;
    for case in 0..8 {
        let (na, nb, d) = (3 + case % 3, 4 + case % 2, 2);
        let x = random_points(&mut rng, na, d, 1.0);
        let y = random_points(&mut rng, nb, d, 1.0) + 0.5;
        let wa: Vec<f64> = (0..na).map(|_| rng.random_range(0.5..2.0)).collect();
        let wb: Vec<f64> = (0..nb).map(|_| rng.random_range(0.5..2.0)).collect();
        let opts = precise(0.3);
        let value = |x: &Array2<f64>, y: &Array2<f64>| {
            sinkhorn_divergence(&WeightedCloud::weighted(x.clone(), &wa).unwrap(), &WeightedCloud::weighted(y.clone(), &wb).unwrap(), opts)
                .unwrap()
        };
        let g = sinkhorn_divergence_grad(
            &WeightedCloud::weighted(x.clone(), &wa).unwrap(),
            &WeightedCloud::weighted(y.clone(), &wb).unwrap(),
            opts,
        )
        .unwrap();
        for ((i, j), &an) in g.d_points_a.indexed_iter() {
            let mut xp = x.clone();
            xp[[i, j]] += h;
            let mut xm = x.clone();
            xm[[i, j]] -= h;
            let fd = (value(&xp, &y) - value(&xm, &y)) / (2.0 * h);
            assert!((an - fd).abs() <= 1e-3 * an.abs().max(fd.abs()).max(1e-3), "case {case} a[{i},{j}]: {an} vs {fd}");
        }
        for ((i, j), &an) in g.d_points_b.indexed_iter() {
            let mut yp = y.clone();
            yp[[i, j]] += h;
            let mut ym = y.clone();
            ym[[i, j]] -= h;
            let fd = (value(&x, &yp) - value(&x, &ym)) / (2.0 * h);
            assert!((an - fd).abs() <= 1e-3 * an.abs().max(fd.abs()).max(1e-3), "case {case} b[{i},{j}]: {an} vs {fd}");
        }
    }
}

fn cloud_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize)> {
    (1usize..6, 1usize..4).prop_flat_map(|(n, d)| {
        (prop::collection::vec(-2.0f64..2.0, n * d), prop::collection::vec(0.1f64..3.0, n), Just(d))
    })
}

fn cloud(points: &[f64], w: &[f64], d: usize) -> WeightedCloud {
    let x = Array2::from_shape_vec((w.len(), d), points.to_vec()).unwrap();
    WeightedCloud::new(x, Array1::from(w.iter().map(|v| v / w.iter().sum::<f64>()).collect::<Vec<_>>())).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn divergence_is_symmetric_and_nonnegative(a in cloud_strategy(), b in cloud_strategy()) {
        let d = a.2;
        prop_assume!(b.2 == d);
        let (ca, cb) = (cloud(&a.0, &a.1, d), cloud(&b.0, &b.1, d));
        let opts = SinkhornOptions { eps: 0.5, max_iter: 5000, tol: 1e-9 };
        let ab = sinkhorn_divergence(&ca, &cb, opts).unwrap();
        let ba = sinkhorn_divergence(&cb, &ca, opts).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9);
    }

    #[test]
    fn masses_sum_to_one(a in cloud_strategy()) {
        let c = cloud(&a.0, &a.1, a.2);
        prop_assert!((c.masses().sum() - 1.0).abs() <= 1e-9);
        prop_assert!(c.masses().iter().all(|&m| m > 0.0));
    }
}
