use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{fmt_f64, Dataset};
use crate::error::{Error, Result};
use crate::model::HyperParams;

use super::{fit, StopReason};

/// Discrete candidate lists; empty lists keep the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub n_durations: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub lambda_r: Vec<f64>,
    pub lambda_w: Vec<f64>,
    pub gamma_wd: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub phi_width: Vec<usize>,
    pub psi_width: Vec<usize>,
}

/// Validation score used to rank candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Full validation objective.
    #[default]
    Objective,
    /// Weighted validation likelihood only, comparable across `gamma_wd` values.
    Nll,
}

impl SearchSpace {
    /// Draws one configuration, each hyperparameter uniformly from its list.
    pub fn sample(&self, base: &HyperParams, rng: &mut ChaCha8Rng) -> HyperParams {
        fn pick<T: Copy>(values: &[T], fallback: T, rng: &mut ChaCha8Rng) -> T {
            if values.is_empty() {
                fallback
            } else {
                values[rng.random_range(0..values.len())]
            }
        }
        let mut h = base.clone();
        h.n_durations = pick(&self.n_durations, h.n_durations, rng);
        h.learning_rate = pick(&self.learning_rate, h.learning_rate, rng);
        h.lambda_r = pick(&self.lambda_r, h.lambda_r, rng);
        h.lambda_w = pick(&self.lambda_w, h.lambda_w, rng);
        h.gamma_wd = pick(&self.gamma_wd, h.gamma_wd, rng);
        h.batch_size = pick(&self.batch_size, h.batch_size, rng);
        h.phi_width = pick(&self.phi_width, h.phi_width, rng);
        h.psi_width = pick(&self.psi_width, h.psi_width, rng);
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaderboardEntry {
    pub rank: usize,
    pub candidate: usize,
    pub hyper: HyperParams,
    /// Validation score, infinite for diverged runs.
    pub score: f64,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best: HyperParams,
    /// Sorted ascending by score.
    pub leaderboard: Vec<LeaderboardEntry>,
}

impl SearchResult {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "rank", "candidate", "score", "best_epoch", "stop_reason", "n_durations", "learning_rate", "lambda_r",
            "lambda_w", "gamma_wd", "batch_size", "phi_width", "psi_width",
        ])?;
        for e in &self.leaderboard {
            let h = &e.hyper;
            w.write_record([
                e.rank.to_string(),
                e.candidate.to_string(),
                fmt_f64(e.score),
                e.best_epoch.to_string(),
                e.stop_reason.as_str().to_string(),
                h.n_durations.to_string(),
                fmt_f64(h.learning_rate),
                fmt_f64(h.lambda_r),
                fmt_f64(h.lambda_w),
                fmt_f64(h.gamma_wd),
                h.batch_size.to_string(),
                h.phi_width.to_string(),
                h.psi_width.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Samples `budget` configurations with replacement, fits each (in parallel) and
/// ranks them by validation score. Every candidate trains with `base.seed`.
pub fn random_search(
    train: &Dataset,
    val: &Dataset,
    base: &HyperParams,
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    selection: Selection,
) -> Result<SearchResult> {
    if budget == 0 {
        return Err(Error::Config("`budget` must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<HyperParams> = (0..budget).map(|_| space.sample(base, &mut rng)).collect();
    let fits: Vec<Result<(f64, usize, StopReason)>> = candidates
        .par_iter()
        .map(|h| {
            let out = fit(train, val, h)?;
            let score = match (out.report.stop_reason, selection) {
                (StopReason::Divergence, _) if out.report.best_epoch == 0 => f64::INFINITY,
                (_, Selection::Objective) => out.report.best_val.total,
                (_, Selection::Nll) => out.report.best_val.nll,
            };
            Ok((score, out.report.best_epoch, out.report.stop_reason))
        })
        .collect();
    let mut board = Vec::with_capacity(budget);
    for (i, (h, r)) in candidates.into_iter().zip(fits).enumerate() {
        let (score, best_epoch, stop_reason) = r?;
        board.push(LeaderboardEntry { rank: 0, candidate: i, hyper: h, score, best_epoch, stop_reason });
    }
    board.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.candidate.cmp(&b.candidate)));
    for (r, e) in board.iter_mut().enumerate() {
        e.rank = r + 1;
    }
    if board.iter().all(|e| !e.score.is_finite()) {
        return Err(Error::Divergence("all search candidates diverged".into()));
    }
    Ok(SearchResult { best: board[0].hyper.clone(), leaderboard: board })
}
