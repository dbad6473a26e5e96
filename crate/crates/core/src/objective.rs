//! Training objective: weighted survival likelihood, importance weights, ridge
//! penalties and the distributional balancing term.
//!
//! For a batch of `n_b` rows,
//!
//! ```text
//! O = (1/n_b) sum_i wt_i L_i + (gamma_wd/n_b) S(phi_1^w, phi_0^w)
//!     + (lambda_r/sqrt(n_b)) |Psi|_2 + (lambda_w/n_b) |w|_2
//! ```
//!
//! where `wt = alpha_t + (1 - alpha_t) w`, `w` has mean 1 within each arm and
//! `S` is the debiased Sinkhorn divergence between the embedded arms.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::model::{log_normalizer, HyperParams, ModelParams, WeightMode};
use crate::sinkhorn::{relative_eps, sinkhorn_divergence_grad_relaxed, DivergenceGrad, SinkhornOptions, WeightedCloud};

/// Propensity scores are clipped to this range before weighting.
pub const PROPENSITY_CLIP: (f64, f64) = (0.01, 0.99);

/// Per-row survival likelihood term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllTerm {
    pub value: f64,
    /// Censored beyond the last cut and excluded.
    pub skipped: bool,
}

/// Negative log-likelihood of one row from its logits, with the gradient with
/// respect to the logits written into `grad` when given.
///
/// Events contribute `-log sigma_k`, censored rows `-log sum_{j > k} sigma_j`.
/// A censored row with `k = m + 1` has an empty tail: it contributes 0 and is
/// flagged, unless `last_bin` is set, in which case it contributes `-log sigma_{m+1}`.
pub fn survival_nll(logits: &[f64], k: usize, delta: u8, last_bin: bool, grad: Option<&mut [f64]>) -> NllTerm {
    let m = logits.len();
    assert!(k <= m + 1, "bin {k} out of range");
    let lse = log_normalizer(logits);
    let (value, skipped, tail_from, tail_lse) = if delta == 1 {
        let target = if k >= 1 && k <= m { logits[k - 1] } else { 0.0 };
        (lse - target, false, None, 0.0)
    } else if k > m {
        if last_bin {
            (lse, false, None, 0.0)
        } else {
            (0.0, true, None, 0.0)
        }
    } else {
        let tail_lse = log_normalizer(&logits[k..]);
        ((lse - tail_lse).max(0.0), false, Some(k), tail_lse)
    };
    if let Some(g) = grad {
        if skipped {
            g.iter_mut().for_each(|v| *v = 0.0);
        } else {
            for (j, gj) in g.iter_mut().enumerate() {
                *gj = (logits[j] - lse).exp();
                match tail_from {
                    Some(from) if j >= from => *gj -= (logits[j] - tail_lse).exp(),
                    None if delta == 1 && j + 1 == k => *gj -= 1.0,
                    _ => {}
                }
            }
        }
    }
    NllTerm { value, skipped }
}

/// Same likelihood from bin probabilities, floored at `1e-12`.
pub fn survival_nll_from_probs(probs: &[f64], k: usize, delta: u8) -> f64 {
    let floor = |p: f64| p.max(1e-12).ln();
    if delta == 1 {
        -floor(probs[k.clamp(1, probs.len()) - 1])
    } else if k >= probs.len() {
        0.0
    } else {
        -floor(probs[k..].iter().sum())
    }
}

/// `w = alpha_t / p(t | x)` before renormalization.
pub fn raw_propensity_weight(e: f64, t: u8, alpha1: f64) -> f64 {
    let e = e.clamp(PROPENSITY_CLIP.0, PROPENSITY_CLIP.1);
    if t == 1 {
        alpha1 / e
    } else {
        (1.0 - alpha1) / (1.0 - e)
    }
}

/// Rescales positive weights to mean 1 within each treatment arm.
pub fn renormalize_per_arm(w: &[f64], t: &[u8]) -> Vec<f64> {
    let mut sum = [0.0; 2];
    let mut count = [0usize; 2];
    for (&wi, &ti) in w.iter().zip(t) {
        sum[ti as usize] += wi;
        count[ti as usize] += 1;
    }
    w.iter().zip(t).map(|(&wi, &ti)| wi * count[ti as usize] as f64 / sum[ti as usize]).collect()
}

/// `wt_i = alpha_{t_i} + (1 - alpha_{t_i}) w_i`.
pub fn tilde_weights(w: &[f64], t: &[u8], alpha1: f64) -> Vec<f64> {
    w.iter()
        .zip(t)
        .map(|(&wi, &ti)| {
            let a = if ti == 1 { alpha1 } else { 1.0 - alpha1 };
            a + (1.0 - a) * wi
        })
        .collect()
}

/// Importance weights from propensity scores: `(w, wt)` with `w` renormalized per arm.
pub fn propensity_weights(e: &[f64], t: &[u8]) -> Result<(Vec<f64>, Vec<f64>)> {
    if e.len() != t.len() {
        return Err(Error::DimensionMismatch { expected: t.len(), got: e.len() });
    }
    if let Some(i) = e.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Config(format!("propensity score {} at row {i} is outside [0, 1]", e[i])));
    }
    let alpha1 = treated_share(t)?;
    let raw: Vec<f64> = e.iter().zip(t).map(|(&ei, &ti)| raw_propensity_weight(ei, ti, alpha1)).collect();
    let w = renormalize_per_arm(&raw, t);
    let wt = tilde_weights(&w, t, alpha1);
    Ok((w, wt))
}

/// `P(T = 1)` in `t`; errors when an arm is empty.
pub fn treated_share(t: &[u8]) -> Result<f64> {
    let n1 = t.iter().filter(|&&v| v == 1).count();
    if n1 == 0 {
        return Err(Error::EmptyArm("treated"));
    }
    if n1 == t.len() {
        return Err(Error::EmptyArm("control"));
    }
    Ok(n1 as f64 / t.len() as f64)
}

/// Logistic regression of treatment on covariates, fit by full-batch gradient descent.
#[derive(Debug, Clone, PartialEq)]
pub struct Logistic {
    pub coef: Array1<f64>,
    pub intercept: f64,
}

impl Logistic {
    pub fn fit(x: &Array2<f64>, t: &[u8]) -> Self {
        let (n, d) = x.dim();
        let y = Array1::from_iter(t.iter().map(|&v| v as f64));
        let mut coef = Array1::zeros(d);
        let mut intercept = 0.0;
        let (lr, l2) = (0.5, 1e-3);
        for _ in 0..500 {
            let p = (x.dot(&coef) + intercept).mapv(|z| 1.0 / (1.0 + (-z).exp()));
            let r = &p - &y;
            let g = x.t().dot(&r) / n as f64 + &coef * l2;
            coef = coef - g * lr;
            intercept -= lr * r.sum() / n as f64;
        }
        Self { coef, intercept }
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<f64> {
        (x.dot(&self.coef) + self.intercept).mapv(|z| 1.0 / (1.0 + (-z).exp())).to_vec()
    }
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-row weight source for the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightConfig {
    pub mode: WeightMode,
    /// Empirical `P(T = 1)` on the training set.
    pub alpha1: f64,
    /// Raw `alpha_t / p(t|x)` (propensity), free parameters `theta` (learned) or ones.
    pub values: Vec<f64>,
}

/// `softplus(theta) = 1` at this value.
pub const LEARNED_INIT: f64 = 0.541_324_854_612_918_1;

impl WeightConfig {
    pub fn uniform(t: &[u8]) -> Result<Self> {
        Ok(Self { mode: WeightMode::Uniform, alpha1: treated_share(t)?, values: vec![1.0; t.len()] })
    }

    pub fn propensity(e: &[f64], t: &[u8]) -> Result<Self> {
        let alpha1 = treated_share(t)?;
        let values = e.iter().zip(t).map(|(&ei, &ti)| raw_propensity_weight(ei, ti, alpha1)).collect();
        Ok(Self { mode: WeightMode::Propensity, alpha1, values })
    }

    pub fn learned(t: &[u8]) -> Result<Self> {
        Ok(Self { mode: WeightMode::Learned, alpha1: treated_share(t)?, values: vec![LEARNED_INIT; t.len()] })
    }

    /// Positive un-normalized weight of row `i`.
    pub fn positive(&self, i: usize) -> f64 {
        match self.mode {
            WeightMode::Learned => softplus(self.values[i]),
            _ => self.values[i],
        }
    }
}

/// `(Omega, Theta)`: norm of all head parameters and of the weight vector (0 when uniform).
pub fn ridge_penalties(params: &ModelParams, w: &[f64], mode: WeightMode) -> (f64, f64) {
    let theta = match mode {
        WeightMode::Uniform => 0.0,
        _ => w.iter().map(|v| v * v).sum::<f64>().sqrt(),
    };
    (params.head_norm(), theta)
}

/// One mini-batch in model space (standardized covariates, bin indices).
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Array2<f64>,
    pub t: Vec<u8>,
    pub k: Vec<usize>,
    pub delta: Vec<u8>,
    /// Positive un-normalized weights.
    pub weights: Vec<f64>,
    pub alpha1: f64,
    pub mode: WeightMode,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn has_both_arms(&self) -> bool {
        self.t.contains(&0) && self.t.contains(&1)
    }

    /// `(w, wt)` for this batch.
    pub fn normalized_weights(&self) -> (Vec<f64>, Vec<f64>) {
        if self.mode == WeightMode::Uniform {
            return (vec![1.0; self.len()], vec![1.0; self.len()]);
        }
        let w = renormalize_per_arm(&self.weights, &self.t);
        let wt = tilde_weights(&w, &self.t, self.alpha1);
        (w, wt)
    }
}

/// Objective value broken down by term.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveTerms {
    /// `(1/n_b) sum wt_i L_i`.
    pub nll: f64,
    /// Raw divergence `S` between the embedded arms.
    pub divergence: f64,
    /// `(gamma_wd / n_b) S`.
    pub balance: f64,
    pub omega: f64,
    pub theta: f64,
    pub total: f64,
    pub skipped_censored: usize,
    pub balance_skipped: bool,
}

/// Rows of `z` split by arm with masses `w_i / sum_arm w`.
pub(crate) fn arm_clouds(z: &Array2<f64>, t: &[u8], w: &[f64]) -> Result<(WeightedCloud, WeightedCloud, [Vec<usize>; 2])> {
    let idx: [Vec<usize>; 2] = [0u8, 1].map(|arm| (0..t.len()).filter(|&i| t[i] == arm).collect());
    let cloud = |ix: &[usize]| {
        let pts = z.select(Axis(0), ix);
        let wts: Vec<f64> = ix.iter().map(|&i| w[i]).collect();
        WeightedCloud::weighted(pts, &wts)
    };
    Ok((cloud(&idx[1])?, cloud(&idx[0])?, idx))
}

/// Divergence between embedded arms (treated first) with gradients, or `None`
/// when the term is inactive.
pub(crate) fn balance_divergence(
    z: &Array2<f64>,
    t: &[u8],
    w: &[f64],
    hyper: &HyperParams,
) -> Result<Option<(DivergenceGrad, [Vec<usize>; 2])>> {
    if hyper.gamma_wd == 0.0 || !(t.contains(&0) && t.contains(&1)) {
        return Ok(None);
    }
    let (a, b, idx) = arm_clouds(z, t, w)?;
    let eps = relative_eps(a.points(), b.points(), hyper.sinkhorn_eps_factor)?;
    let opts = SinkhornOptions { eps, max_iter: hyper.sinkhorn_max_iter, tol: hyper.sinkhorn_tol };
    Ok(Some((sinkhorn_divergence_grad_relaxed(&a, &b, opts)?, idx)))
}

/// Objective value on a batch.
pub fn total_objective(params: &ModelParams, batch: &Batch, hyper: &HyperParams) -> Result<ObjectiveTerms> {
    let fwd = params.forward(&batch.x, &batch.t);
    objective_from_forward(params, batch, hyper, &fwd.logits, &fwd.z)
}

pub(crate) fn objective_from_forward(
    params: &ModelParams,
    batch: &Batch,
    hyper: &HyperParams,
    logits: &Array2<f64>,
    z: &Array2<f64>,
) -> Result<ObjectiveTerms> {
    let n = batch.len() as f64;
    let (w, wt) = batch.normalized_weights();
    let mut terms = ObjectiveTerms::default();
    for (i, row) in logits.rows().into_iter().enumerate() {
        let l = survival_nll(row.as_slice().expect("contiguous"), batch.k[i], batch.delta[i], hyper.censored_beyond_uses_last_bin, None);
        terms.skipped_censored += usize::from(l.skipped);
        terms.nll += wt[i] * l.value / n;
    }
    match balance_divergence(z, &batch.t, &w, hyper)? {
        Some((d, _)) => {
            terms.divergence = d.value;
            terms.balance = hyper.gamma_wd / n * d.value;
        }
        None => terms.balance_skipped = hyper.gamma_wd > 0.0,
    }
    let (omega, theta) = ridge_penalties(params, &w, batch.mode);
    terms.omega = hyper.lambda_r / n.sqrt() * omega;
    terms.theta = hyper.lambda_w / n * theta;
    terms.total = terms.nll + terms.balance + terms.omega + terms.theta;
    if !terms.total.is_finite() {
        return Err(Error::Divergence(format!("non-finite objective {}", terms.total)));
    }
    Ok(terms)
}
