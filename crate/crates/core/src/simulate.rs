//! Synthetic and semi-synthetic censored survival data with closed-form truth.
//!
//! Potential event times follow a Weibull proportional-hazards model
//!
//! ```text
//! S_t(x, y) = exp(-(lambda y)^alpha * exp(s(x) + epsilon t))
//! ```
//!
//! with a linear (`Ls`) or non-linear (`Nls`) risk score `s(x)`. Censoring times
//! are exponential with a rate calibrated to a target censoring fraction.

use std::io::Write;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{fmt_f64, Dataset, Standardizer};
use crate::discretize::quantile;
use crate::error::{Error, Result};
use crate::sinkhorn::{relative_eps, sinkhorn_divergence, SinkhornOptions, WeightedCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Ls,
    Nls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// `t_i ~ Bernoulli(sigmoid((-1)^i exp(i / 10)))` with `i` the 1-based row index.
    #[default]
    IndexBased,
    /// `t_i ~ Bernoulli(sigmoid(x_i . beta / |beta|))` on the unshifted covariates.
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    pub p_wd: f64,
    pub scheme: Scheme,
    pub alpha: f64,
    pub lambda: f64,
    /// Log-hazard treatment effect; `None` picks the scheme default (0.8 for LS, 1.8 for NLS).
    pub epsilon: Option<f64>,
    pub censor_target: f64,
    pub assignment: Assignment,
    /// Quantile of all potential event times used as the evaluation horizon.
    pub tau_quantile: f64,
    /// Z-score real covariates before simulating (semi-synthetic data only).
    pub standardize_covariates: bool,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            p: 25,
            rho: 0.1,
            p_wd: 1.0,
            scheme: Scheme::Ls,
            alpha: 2.0,
            lambda: 1.0,
            epsilon: None,
            censor_target: 0.30,
            assignment: Assignment::IndexBased,
            tau_quantile: 0.95,
            standardize_covariates: true,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or(match self.scheme {
            Scheme::Ls => 0.8,
            Scheme::Nls => 1.8,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("`{key}` {why}")));
        if self.n < 10 {
            return bad("n", "must be at least 10");
        }
        if self.p < 2 {
            return bad("p", "must be at least 2");
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad("rho", "must lie in [0, 1)");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha", "must be positive");
        }
        if !(self.lambda > 0.0) {
            return bad("lambda", "must be positive");
        }
        if !(self.censor_target > 0.0 && self.censor_target < 1.0) {
            return bad("censor_target", "must lie in (0, 1)");
        }
        if !(self.tau_quantile > 0.0 && self.tau_quantile < 1.0) {
            return bad("tau_quantile", "must lie in (0, 1)");
        }
        if !self.p_wd.is_finite() || !self.epsilon().is_finite() {
            return bad("p_wd/epsilon", "must be finite");
        }
        Ok(())
    }
}

/// Independent random streams derived from one seed, one per pipeline stage.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_FEATURES: u64 = 1;
const STREAM_TREATMENT: u64 = 2;
const STREAM_EVENTS: u64 = 3;
const STREAM_CENSORING: u64 = 4;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Rows i.i.d. `N(0, Sigma)` with Toeplitz `Sigma[j, k] = rho^|j - k|`.
pub fn gen_features(config: &SimConfig) -> Result<Array2<f64>> {
    config.validate()?;
    let p = config.p;
    let sigma = DMatrix::from_fn(p, p, |j, k| config.rho.powi((j as i32 - k as i32).abs()));
    let chol = sigma.cholesky().ok_or(Error::Cholesky)?;
    let l = chol.l();
    let mut rng = stream(config.seed, STREAM_FEATURES);
    let mut x = Array2::zeros((config.n, p));
    let mut z = vec![0.0; p];
    for i in 0..config.n {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for j in 0..p {
            x[[i, j]] = (0..=j).map(|k| l[(j, k)] * z[k]).sum();
        }
    }
    Ok(x)
}

/// Unit-norm coefficients `beta_j ∝ (-1)^j exp(j / 10)`, `j = 1..p`.
pub fn ls_beta(p: usize) -> Vec<f64> {
    let raw: Vec<f64> = (1..=p)
        .map(|j| if j % 2 == 0 { 1.0 } else { -1.0 } * (j as f64 / 10.0).exp())
        .collect();
    let norm = raw.iter().map(|b| b * b).sum::<f64>().sqrt();
    raw.into_iter().map(|b| b / norm).collect()
}

/// Draws treatments, then translates every covariate by `p_wd (2 t - 1)` in place.
pub fn assign_treatment(features: &mut Array2<f64>, config: &SimConfig) -> Vec<u8> {
    let mut rng = stream(config.seed, STREAM_TREATMENT);
    let beta = ls_beta(features.ncols());
    let t: Vec<u8> = (0..features.nrows())
        .map(|row| {
            let prob = match config.assignment {
                Assignment::IndexBased => {
                    let i = (row + 1) as f64;
                    let sign = if (row + 1) % 2 == 0 { 1.0 } else { -1.0 };
                    sigmoid(sign * (i / 10.0).exp())
                }
                Assignment::Logistic => {
                    let xb: f64 = features.row(row).iter().zip(&beta).map(|(x, b)| x * b).sum();
                    sigmoid(xb)
                }
            };
            u8::from(rng.random::<f64>() < prob)
        })
        .collect();
    for (mut row, &ti) in features.rows_mut().into_iter().zip(&t) {
        let shift = config.p_wd * (2.0 * ti as f64 - 1.0);
        row.mapv_inplace(|v| v + shift);
    }
    t
}

/// Risk score `s(x)`.
pub fn s_of_x(x: &[f64], scheme: Scheme) -> f64 {
    match scheme {
        Scheme::Ls => x.iter().zip(ls_beta(x.len())).map(|(a, b)| a * b).sum(),
        Scheme::Nls => {
            let p = x.len();
            x.windows(2).map(|w| (w[0] * w[1]).sin()).sum::<f64>() / (p - 1) as f64
        }
    }
}

/// Weibull survival `exp(-(lambda y)^alpha exp(risk))`.
pub fn weibull_survival(y: f64, risk: f64, alpha: f64, lambda: f64) -> f64 {
    (-(lambda * y.max(0.0)).powf(alpha) * risk.exp()).exp()
}

/// Inverse-transform draw: the `Y` with `S_t(x, Y) = u`.
pub fn sample_event_time(s: f64, t: u8, config: &SimConfig, u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Config(format!("uniform draw must lie in (0, 1), got {u}")));
    }
    let risk = s + config.epsilon() * t as f64;
    Ok((-u.ln() * (-risk).exp()).powf(1.0 / config.alpha) / config.lambda)
}

/// Outcome of [`calibrate_censoring`].
#[derive(Debug, Clone)]
pub struct Censoring {
    pub lambda_c: f64,
    pub censor_times: Vec<f64>,
    pub observed: Vec<f64>,
    pub event: Vec<u8>,
}

impl Censoring {
    pub fn fraction(&self) -> f64 {
        self.event.iter().filter(|&&d| d == 0).count() as f64 / self.event.len() as f64
    }
}

fn censored_fraction(times: &[f64], expo: &[f64], rate: f64) -> f64 {
    times.iter().zip(expo).filter(|(&y, &e)| e / rate < y).count() as f64 / times.len() as f64
}

/// Finds an exponential censoring rate by bisection (in log-rate over `[1e-6, 1e6]`)
/// so that the fraction of `C_i < Y_i` is within 0.03 of `target`.
///
/// `uniforms` fixes the censoring draws: `C_i = -ln(u_i) / lambda_c`.
pub fn calibrate_censoring(event_times: &[f64], uniforms: &[f64], target: f64) -> Result<Censoring> {
    if event_times.is_empty() || event_times.len() != uniforms.len() {
        return Err(Error::Calibration("need one uniform draw per event time".into()));
    }
    let expo: Vec<f64> = uniforms.iter().map(|u| -u.ln()).collect();
    let (mut lo, mut hi) = (1e-6f64.ln(), 1e6f64.ln());
    let (f_lo, f_hi) = (
        censored_fraction(event_times, &expo, lo.exp()),
        censored_fraction(event_times, &expo, hi.exp()),
    );
    if !(f_lo <= target && target <= f_hi) {
        return Err(Error::Calibration(format!(
            "target {target} not bracketed: fractions [{f_lo}, {f_hi}]"
        )));
    }
    let half_step = 0.5 / event_times.len() as f64;
    let mut best = (f64::INFINITY, lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f = censored_fraction(event_times, &expo, mid.exp());
        if (f - target).abs() < best.0 {
            best = ((f - target).abs(), mid);
        }
        if (f - target).abs() <= half_step {
            break;
        }
        if f < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if best.0 > 0.03 {
        return Err(Error::Calibration(format!("closest censoring fraction misses target by {}", best.0)));
    }
    let lambda_c = best.1.exp();
    let censor_times: Vec<f64> = expo.iter().map(|e| e / lambda_c).collect();
    let observed = event_times.iter().zip(&censor_times).map(|(y, c)| y.min(*c)).collect();
    let event = event_times.iter().zip(&censor_times).map(|(y, c)| u8::from(y <= c)).collect();
    Ok(Censoring { lambda_c, censor_times, observed, event })
}

/// Closed-form ground truth for a simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub s_values: Vec<f64>,
    pub alpha: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub lambda_c: f64,
    pub tau_min: f64,
}

impl SimTruth {
    pub fn survival(&self, i: usize, t: u8, y: f64) -> f64 {
        self.survival_for_score(self.s_values[i], t, y)
    }

    pub fn survival_for_score(&self, s: f64, t: u8, y: f64) -> f64 {
        weibull_survival(y, s + self.epsilon * t as f64, self.alpha, self.lambda)
    }

    /// Event-time density `alpha lambda^alpha y^(alpha-1) exp(risk) S(y)`.
    pub fn density_for_score(&self, s: f64, t: u8, y: f64) -> f64 {
        let risk = s + self.epsilon * t as f64;
        if y <= 0.0 {
            return if self.alpha == 1.0 { self.lambda * risk.exp() } else { 0.0 };
        }
        self.alpha * self.lambda.powf(self.alpha) * y.powf(self.alpha - 1.0) * risk.exp()
            * self.survival_for_score(s, t, y)
    }

    /// `S_1(x_i, y) - S_0(x_i, y)`.
    pub fn cate(&self, i: usize, y: f64) -> f64 {
        self.survival(i, 1, y) - self.survival(i, 0, y)
    }

    /// Censoring survival `exp(-lambda_c y)`, identical in both arms.
    pub fn censoring_survival(&self, y: f64) -> f64 {
        (-self.lambda_c * y.max(0.0)).exp()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self { s_values: idx.iter().map(|&i| self.s_values[i]).collect(), ..self.clone() }
    }

    /// Writes `i,tau,cate_true,surv0_true,surv1_true` for every row and time.
    pub fn write_csv<W: Write>(&self, writer: W, rows: &[usize], times: &[f64]) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["i", "tau", "cate_true", "surv0_true", "surv1_true"])?;
        for &i in rows {
            for &tau in times {
                let (s0, s1) = (self.survival(i, 0, tau), self.survival(i, 1, tau));
                w.write_record([i.to_string(), fmt_f64(tau), fmt_f64(s1 - s0), fmt_f64(s0), fmt_f64(s1)])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Scalar parameters as `key = value` lines (scores are stored separately).
    pub fn meta_toml(&self) -> String {
        format!(
            "alpha = {:?}\nlambda = {:?}\nepsilon = {:?}\nlambda_c = {:?}\ntau_min = {:?}\n",
            self.alpha, self.lambda, self.epsilon, self.lambda_c, self.tau_min
        )
    }

    /// Writes `i,s` rows.
    pub fn write_scores<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["i", "s"])?;
        for (i, s) in self.s_values.iter().enumerate() {
            w.write_record([i.to_string(), fmt_f64(*s)])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rebuilds the truth from [`SimTruth::meta_toml`] text and an `i,s` CSV.
    pub fn from_parts(meta: &str, scores: impl std::io::Read) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            alpha: f64,
            lambda: f64,
            epsilon: f64,
            lambda_c: f64,
            tau_min: f64,
        }
        let m: Meta = toml::from_str(meta).map_err(|e| Error::Parse(e.to_string()))?;
        let mut r = csv::Reader::from_reader(scores);
        let mut s_values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let s = rec.get(1).ok_or_else(|| Error::Parse("score row needs 2 fields".into()))?;
            s_values.push(crate::dataset::parse_f64(s).map_err(Error::Parse)?);
        }
        Ok(Self {
            s_values,
            alpha: m.alpha,
            lambda: m.lambda,
            epsilon: m.epsilon,
            lambda_c: m.lambda_c,
            tau_min: m.tau_min,
        })
    }
}

/// Treatment, outcomes and censoring on top of given covariates.
fn simulate_outcomes(mut features: Array2<f64>, config: &SimConfig) -> Result<(Dataset, SimTruth)> {
    let t = assign_treatment(&mut features, config);
    let s_values: Vec<f64> = features.rows().into_iter().map(|r| s_of_x(&r.to_vec(), config.scheme)).collect();

    let mut rng = stream(config.seed, STREAM_EVENTS);
    let mut factual = Vec::with_capacity(features.nrows());
    let mut potential = Vec::with_capacity(2 * features.nrows());
    for (i, &s) in s_values.iter().enumerate() {
        let mut draw = || loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                return u;
            }
        };
        let y0 = sample_event_time(s, 0, config, draw())?;
        let y1 = sample_event_time(s, 1, config, draw())?;
        factual.push(if t[i] == 1 { y1 } else { y0 });
        potential.extend([y0, y1]);
    }
    let tau_min = quantile(&potential, config.tau_quantile);

    let mut rng = stream(config.seed, STREAM_CENSORING);
    let uniforms: Vec<f64> = (0..factual.len())
        .map(|_| loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                break u;
            }
        })
        .collect();
    let cens = calibrate_censoring(&factual, &uniforms, config.censor_target)?;

    let tf: Vec<f64> = t.iter().map(|&v| v as f64).collect();
    let df: Vec<f64> = cens.event.iter().map(|&v| v as f64).collect();
    let dataset = Dataset::new(features, &tf, &cens.observed, &df)?;
    let truth = SimTruth {
        s_values,
        alpha: config.alpha,
        lambda: config.lambda,
        epsilon: config.epsilon(),
        lambda_c: cens.lambda_c,
        tau_min,
    };
    Ok((dataset, truth))
}

/// Full synthetic pipeline: Gaussian covariates, treatment and shift, Weibull
/// outcomes, calibrated exponential censoring.
pub fn make_synthetic(config: &SimConfig) -> Result<(Dataset, SimTruth)> {
    config.validate()?;
    simulate_outcomes(gen_features(config)?, config)
}

/// Same as [`make_synthetic`] on user-provided covariates; `config.n` is ignored.
pub fn make_semisynthetic(covariates: &Array2<f64>, config: &SimConfig) -> Result<(Dataset, SimTruth)> {
    if covariates.ncols() != config.p {
        return Err(Error::DimensionMismatch { expected: config.p, got: covariates.ncols() });
    }
    let cfg = SimConfig { n: covariates.nrows(), ..config.clone() };
    cfg.validate()?;
    let x = if cfg.standardize_covariates {
        Standardizer::fit(covariates).transform(covariates)
    } else {
        covariates.clone()
    };
    simulate_outcomes(x, &cfg)
}

/// Debiased entropic OT divergence between the treated and control covariate clouds
/// (uniform masses, squared-Euclidean cost, `eps = 0.05 * median cost`).
pub fn initial_wasserstein(dataset: &Dataset) -> Result<f64> {
    let x = dataset.features();
    let idx1: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.treatment()[i] == 1).collect();
    let idx0: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.treatment()[i] == 0).collect();
    if idx1.is_empty() || idx0.is_empty() {
        return Err(Error::EmptyArm(if idx1.is_empty() { "treated" } else { "control" }));
    }
    let a = x.select(ndarray::Axis(0), &idx1);
    let b = x.select(ndarray::Axis(0), &idx0);
    let eps = relative_eps(&a, &b, 0.05)?;
    let opts = SinkhornOptions { eps, max_iter: 1000, tol: 1e-6 };
    sinkhorn_divergence(&WeightedCloud::uniform(a)?, &WeightedCloud::uniform(b)?, opts)
}
