//! Reverse-mode gradient of the batch objective.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{HyperParams, ModelParams, WeightMode};
use crate::objective::{balance_divergence, ridge_penalties, survival_nll, Batch, ObjectiveTerms};
use crate::sinkhorn::relative_eps_entries;

/// Gradient of the batch objective.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub params: ModelParams,
    /// Gradient with respect to the free weight parameters of each batch row
    /// (learned mode only).
    pub weights: Option<Vec<f64>>,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        let p: f64 = self.params.to_flat().iter().map(|v| v * v).sum();
        let w: f64 = self.weights.iter().flatten().map(|v| v * v).sum();
        (p + w).sqrt()
    }
}

/// Objective terms and their exact gradient.
///
/// In learned mode `batch.weights` holds `softplus(theta)` and the returned
/// weight gradient is with respect to `theta`.
pub fn gradient(params: &ModelParams, batch: &Batch, hyper: &HyperParams) -> Result<(ObjectiveTerms, Gradient)> {
    let n = batch.len();
    let nf = n as f64;
    let fwd = params.forward(&batch.x, &batch.t);
    let (w, wt) = batch.normalized_weights();
    let m = params.m();

    let mut terms = ObjectiveTerms::default();
    let mut d_logits = Array2::zeros((n, m));
    let mut losses = vec![0.0; n];
    let mut g = vec![0.0; m];
    for (i, row) in fwd.logits.rows().into_iter().enumerate() {
        let l = survival_nll(
            row.as_slice().expect("contiguous"),
            batch.k[i],
            batch.delta[i],
            hyper.censored_beyond_uses_last_bin,
            Some(&mut g),
        );
        terms.skipped_censored += usize::from(l.skipped);
        losses[i] = l.value;
        terms.nll += wt[i] * l.value / nf;
        for (j, gj) in g.iter().enumerate() {
            d_logits[[i, j]] = wt[i] / nf * gj;
        }
    }

    let mut d_z = Array2::zeros(fwd.z.dim());
    let mut d_mass = vec![0.0; n];
    match balance_divergence(&fwd.z, &batch.t, &w, hyper)? {
        Some((dg, idx)) => {
            let scale = hyper.gamma_wd / nf;
            terms.divergence = dg.value;
            terms.balance = scale * dg.value;
            for (r, &i) in idx[1].iter().enumerate() {
                d_z.row_mut(i).scaled_add(scale, &dg.d_points_a.row(r));
                d_mass[i] = scale * dg.d_masses_a[r];
            }
            for (r, &i) in idx[0].iter().enumerate() {
                d_z.row_mut(i).scaled_add(scale, &dg.d_points_b.row(r));
                d_mass[i] = scale * dg.d_masses_b[r];
            }
            // eps = factor * median cross cost, differentiated through the median entries
            if dg.d_eps != 0.0 {
                let za = fwd.z.select(ndarray::Axis(0), &idx[1]);
                let zb = fwd.z.select(ndarray::Axis(0), &idx[0]);
                let (_, entries) = relative_eps_entries(&za, &zb, hyper.sinkhorn_eps_factor)?;
                for (ia, ib, coef) in entries {
                    let (i, j) = (idx[1][ia], idx[0][ib]);
                    let diff = &fwd.z.row(i) - &fwd.z.row(j);
                    let c = scale * dg.d_eps * coef * 2.0;
                    d_z.row_mut(i).scaled_add(c, &diff);
                    d_z.row_mut(j).scaled_add(-c, &diff);
                }
            }
        }
        None => terms.balance_skipped = hyper.gamma_wd > 0.0,
    }

    let mut grad = params.backward(&fwd, &d_logits, Some(&d_z));

    let (omega, theta) = ridge_penalties(params, &w, batch.mode);
    terms.omega = hyper.lambda_r / nf.sqrt() * omega;
    terms.theta = hyper.lambda_w / nf * theta;
    terms.total = terms.nll + terms.balance + terms.omega + terms.theta;
    if omega > 0.0 && hyper.lambda_r > 0.0 {
        let c = hyper.lambda_r / nf.sqrt() / omega;
        for (gl, pl) in grad.psi.iter_mut().zip(&params.psi) {
            gl.w.scaled_add(c, &pl.w);
            gl.b.scaled_add(c, &pl.b);
        }
    }

    let weights = (batch.mode == WeightMode::Learned).then(|| {
        // w_i = n_A m_i, m_i = s_i / sum_A s, s_i = softplus(theta_i)
        let mut d_m = vec![0.0; n];
        let mut count = [0usize; 2];
        let mut sum_s = [0.0; 2];
        for i in 0..n {
            count[batch.t[i] as usize] += 1;
            sum_s[batch.t[i] as usize] += batch.weights[i];
        }
        for i in 0..n {
            let a = if batch.t[i] == 1 { batch.alpha1 } else { 1.0 - batch.alpha1 };
            let mut d_w = (1.0 - a) * losses[i] / nf;
            if theta > 0.0 {
                d_w += hyper.lambda_w / nf * w[i] / theta;
            }
            d_m[i] = count[batch.t[i] as usize] as f64 * d_w + d_mass[i];
        }
        let mut mean = [0.0; 2];
        for i in 0..n {
            let arm = batch.t[i] as usize;
            mean[arm] += batch.weights[i] / sum_s[arm] * d_m[i];
        }
        (0..n)
            .map(|i| {
                let arm = batch.t[i] as usize;
                let s = batch.weights[i];
                (d_m[i] - mean[arm]) / sum_s[arm] * (-(-s).exp_m1())
            })
            .collect()
    });

    if !terms.total.is_finite() || !grad.is_finite() {
        return Err(Error::Divergence(format!("non-finite objective or gradient (objective {})", terms.total)));
    }
    Ok((terms, Gradient { params: grad, weights }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::objective::total_objective;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(mode: WeightMode, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 10;
        let t: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        Batch {
            x: Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0)),
            k: (0..n).map(|_| rng.random_range(1..=5)).collect(),
            delta: (0..n).map(|i| u8::from(i % 3 != 0)).collect(),
            weights: (0..n).map(|_| rng.random_range(0.5..2.0)).collect(),
            t,
            alpha1: 0.4,
            mode,
        }
    }

    #[test]
    fn value_matches_objective() {
        let hyper = HyperParams { phi_width: 5, psi_width: 4, embed_dim: Some(3), gamma_wd: 0.3, lambda_r: 0.1, lambda_w: 0.2, ..HyperParams::default() };
        let p = init_params(3, 4, &hyper, 1);
        for mode in [WeightMode::Uniform, WeightMode::Propensity, WeightMode::Learned] {
            let b = batch(mode, 2);
            let (terms, _) = gradient(&p, &b, &hyper).unwrap();
            let direct = total_objective(&p, &b, &hyper).unwrap();
            assert!((terms.total - direct.total).abs() < 1e-12);
        }
    }
}
