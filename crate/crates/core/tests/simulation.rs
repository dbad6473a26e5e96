use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use survbal::dataset::Dataset;
use survbal::simulate::{calibrate_censoring, make_synthetic, sample_event_time, weibull_survival, Scheme, SimConfig};

#[test]
fn sampled_times_follow_the_survival_function() {
    let cfg = SimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (s, t) in [(0.0, 0u8), (0.4, 1), (-0.7, 1), (1.1, 0)] {
        let mut y: Vec<f64> =
            (0..100_000).map(|_| sample_event_time(s, t, &cfg, rng.random_range(f64::EPSILON..1.0)).unwrap()).collect();
        y.sort_by(f64::total_cmp);
        let n = y.len() as f64;
        let risk = s + cfg.epsilon() * t as f64;
        let sup = y
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let model = weibull_survival(v, risk, cfg.alpha, cfg.lambda);
                // empirical survival just before and at v
                let before = 1.0 - i as f64 / n;
                let at = 1.0 - (i + 1) as f64 / n;
                (model - before).abs().max((model - at).abs())
            })
            .fold(0.0, f64::max);
        assert!(sup < 0.01, "s {s} t {t}: sup deviation {sup}");
    }
}

#[test]
fn censoring_is_calibrated_on_both_schemes() {
    for scheme in [Scheme::Ls, Scheme::Nls] {
        for seed in 0..10 {
            let cfg = SimConfig { scheme, seed, ..SimConfig::default() };
            let (data, _) = make_synthetic(&cfg).unwrap();
            let frac = data.censored_fraction();
            assert!((frac - 0.30).abs() <= 0.03, "{scheme:?} seed {seed}: {frac}");
        }
    }
}

#[test]
fn censoring_times_do_not_depend_on_the_risk_score() {
    let cfg = SimConfig { n: 5000, seed: 3, ..SimConfig::default() };
    let (_, truth) = make_synthetic(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let events: Vec<f64> = truth
        .s_values
        .iter()
        .map(|&s| sample_event_time(s, 0, &cfg, rng.random_range(f64::EPSILON..1.0)).unwrap())
        .collect();
    let uniforms: Vec<f64> = (0..events.len()).map(|_| rng.random_range(f64::EPSILON..1.0)).collect();
    let c = calibrate_censoring(&events, &uniforms, 0.3).unwrap();
    let n = events.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (mc, ms) = (mean(&c.censor_times), mean(&truth.s_values));
    let cov: f64 = c.censor_times.iter().zip(&truth.s_values).map(|(a, b)| (a - mc) * (b - ms)).sum::<f64>() / n;
    let sd = |v: &[f64], m: f64| (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n).sqrt();
    let corr = cov / (sd(&c.censor_times, mc) * sd(&truth.s_values, ms));
    // 4 standard errors of a null correlation
    assert!(corr.abs() < 4.0 / n.sqrt(), "corr {corr}");
}

#[test]
fn simulation_is_a_function_of_its_config() {
    let cfg = SimConfig { n: 200, seed: 17, ..SimConfig::default() };
    let (a, ta) = make_synthetic(&cfg).unwrap();
    let (b, tb) = make_synthetic(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    let (c, _) = make_synthetic(&SimConfig { seed: 18, ..cfg }).unwrap();
    assert_ne!(a, c);
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (2usize..20, 1usize..5).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(-1e6f64..1e6, n * d),
            prop::collection::vec(0u8..2, n),
            prop::collection::vec(0.0f64..50.0, n),
            prop::collection::vec(0u8..2, n),
        )
            .prop_map(move |(x, t, y, e)| {
                let mut t: Vec<f64> = t.into_iter().map(f64::from).collect();
                t[0] = 0.0;
                t[1] = 1.0;
                let e: Vec<f64> = e.into_iter().map(f64::from).collect();
                Dataset::new(ndarray::Array2::from_shape_vec((n, d), x).unwrap(), &t, &y, &e).unwrap()
            })
    })
}

proptest! {
    #[test]
    fn dataset_csv_round_trip_is_exact(data in dataset_strategy()) {
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back, data);
    }
}
