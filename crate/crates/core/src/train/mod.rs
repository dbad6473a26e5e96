//! Optimization loop: mini-batch Adam with early stopping, and random search.

mod adam;
mod grad;
mod search;

use std::io::{Read, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::Adam;
pub use grad::{gradient, Gradient};
pub use search::{random_search, LeaderboardEntry, SearchResult, SearchSpace, Selection};

use crate::dataset::{fmt_f64, parse_f64, Dataset, Standardizer};
use crate::discretize::{grid_equidistant, grid_km_quantile_until, kaplan_meier, quantile};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::{init_params, GridType, HyperParams, Model, StopMetric, WeightMode};
use crate::objective::{raw_propensity_weight, total_objective, Batch, Logistic, ObjectiveTerms, WeightConfig};

/// Minimum decrease of the validation score that counts as an improvement.
pub const IMPROVEMENT: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
    Divergence,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Patience => "patience",
            Self::MaxEpochs => "max_epochs",
            Self::Divergence => "divergence",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_obj: f64,
    pub val_obj: f64,
    pub balance_term: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Epoch 0 is the evaluation at initialization.
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Validation terms of the returned parameters.
    pub best_val: ObjectiveTerms,
    pub stop_reason: StopReason,
    pub divergence: Option<String>,
    pub skipped_balance_batches: usize,
    pub skipped_censored_rows: usize,
}

impl TrainReport {
    /// Writes `epoch,train_obj,val_obj,balance_term,seconds`. Without `timing` the
    /// seconds column is 0 so that repeated runs produce identical files.
    pub fn write_csv<W: Write>(&self, writer: W, timing: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "train_obj", "val_obj", "balance_term", "seconds"])?;
        for r in &self.records {
            let secs = if timing { r.seconds } else { 0.0 };
            w.write_record([
                r.epoch.to_string(),
                fmt_f64(r.train_obj),
                fmt_f64(r.val_obj),
                fmt_f64(r.balance_term),
                fmt_f64(secs),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Vec<EpochRecord>> {
        let mut r = csv::Reader::from_reader(reader);
        let mut out = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let f = |i: usize| -> Result<f64> {
                parse_f64(rec.get(i).ok_or_else(|| Error::Parse("short report row".into()))?).map_err(Error::Parse)
            };
            out.push(EpochRecord {
                epoch: f(0)? as usize,
                train_obj: f(1)?,
                val_obj: f(2)?,
                balance_term: f(3)?,
                seconds: f(4)?,
            });
        }
        Ok(out)
    }
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: Model,
    pub report: TrainReport,
    pub weights: WeightConfig,
}

/// Time grid from the training split: the last cut is the `grid_quantile` of
/// observed times.
pub fn build_grid(train: &Dataset, hyper: &HyperParams) -> Result<TimeGrid> {
    let t_max = quantile(train.time(), hyper.grid_quantile);
    match hyper.grid_type {
        GridType::Equidistant => grid_equidistant(t_max, hyper.n_durations),
        GridType::KmQuantile => {
            let km = kaplan_meier(train.time(), train.event())?;
            grid_km_quantile_until(&km, hyper.n_durations, t_max)
        }
    }
}

struct Prepared {
    x: ndarray::Array2<f64>,
    t: Vec<u8>,
    k: Vec<usize>,
    delta: Vec<u8>,
}

impl Prepared {
    fn new(ds: &Dataset, scaler: &Standardizer, grid: &TimeGrid) -> Self {
        Self {
            x: scaler.transform(ds.features()),
            t: ds.treatment().to_vec(),
            k: ds.time().iter().map(|&y| grid.interval_index(y)).collect(),
            delta: ds.event().to_vec(),
        }
    }

    fn batch(&self, idx: &[usize], weights: &WeightConfig) -> Batch {
        Batch {
            x: self.x.select(ndarray::Axis(0), idx),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            k: idx.iter().map(|&i| self.k[i]).collect(),
            delta: idx.iter().map(|&i| self.delta[i]).collect(),
            weights: idx.iter().map(|&i| weights.positive(i)).collect(),
            alpha1: weights.alpha1,
            mode: weights.mode,
        }
    }
}

fn score(terms: &ObjectiveTerms, metric: StopMetric) -> f64 {
    match metric {
        StopMetric::Objective => terms.total,
        StopMetric::Nll => terms.nll,
    }
}

/// Trains on `train`, selecting the epoch with the best validation score.
///
/// A non-finite objective or gradient stops training with
/// [`StopReason::Divergence`]; the returned model is then the best finite one.
pub fn fit(train: &Dataset, val: &Dataset, hyper: &HyperParams) -> Result<FitOutput> {
    hyper.validate()?;
    if train.n_features() != val.n_features() {
        return Err(Error::DimensionMismatch { expected: train.n_features(), got: val.n_features() });
    }
    let scaler = Standardizer::fit(train.features());
    let grid = build_grid(train, hyper)?;
    let tr = Prepared::new(train, &scaler, &grid);
    let va = Prepared::new(val, &scaler, &grid);

    let (mut weights, val_weights) = match hyper.weight_mode {
        WeightMode::Uniform => (WeightConfig::uniform(&tr.t)?, None),
        WeightMode::Learned => (WeightConfig::learned(&tr.t)?, None),
        WeightMode::Propensity => {
            let logit = Logistic::fit(&tr.x, &tr.t);
            let w = WeightConfig::propensity(&logit.predict(&tr.x), &tr.t)?;
            let e_val = logit.predict(&va.x);
            let values = e_val.iter().zip(&va.t).map(|(&e, &t)| raw_propensity_weight(e, t, w.alpha1)).collect();
            let vw = WeightConfig { mode: WeightMode::Propensity, alpha1: w.alpha1, values };
            (w, Some(vw))
        }
    };
    let val_weights = match val_weights {
        Some(v) => v,
        None => WeightConfig { mode: WeightMode::Uniform, alpha1: weights.alpha1, values: vec![1.0; va.t.len()] },
    };
    let val_idx: Vec<usize> = (0..va.t.len()).collect();
    let val_batch = va.batch(&val_idx, &val_weights);

    let mut params = init_params(train.n_features(), grid.m(), hyper, hyper.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    rng.set_stream(11);
    let mut opt = Adam::new(params.n_params(), hyper.learning_rate);
    let mut opt_w = Adam::new(weights.values.len(), hyper.learning_rate);

    let n = tr.t.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::new();
    let mut skipped_balance_batches = 0;
    let mut skipped_censored_rows = 0;

    // epoch 0: evaluation at initialization
    let start = Instant::now();
    let mut acc = (0.0, 0.0);
    for chunk in order.chunks(hyper.batch_size) {
        let t = total_objective(&params, &tr.batch(chunk, &weights), hyper)?;
        acc.0 += t.total * chunk.len() as f64;
        acc.1 += t.balance * chunk.len() as f64;
    }
    let val0 = total_objective(&params, &val_batch, hyper)?;
    records.push(EpochRecord {
        epoch: 0,
        train_obj: acc.0 / n as f64,
        val_obj: val0.total,
        balance_term: acc.1 / n as f64,
        seconds: start.elapsed().as_secs_f64(),
    });
    let mut best = (score(&val0, hyper.stop_metric), params.clone(), 0usize, val0);
    let mut since = 0;
    let mut stop_reason = StopReason::MaxEpochs;
    let mut divergence = None;

    'epochs: for epoch in 1..=hyper.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut acc = (0.0, 0.0);
        for chunk in order.chunks(hyper.batch_size) {
            let batch = tr.batch(chunk, &weights);
            let (terms, mut g) = match gradient(&params, &batch, hyper) {
                Ok(v) => v,
                Err(Error::Divergence(msg)) => {
                    stop_reason = StopReason::Divergence;
                    divergence = Some(msg);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            skipped_balance_batches += usize::from(terms.balance_skipped);
            skipped_censored_rows += terms.skipped_censored;
            acc.0 += terms.total * chunk.len() as f64;
            acc.1 += terms.balance * chunk.len() as f64;

            let norm = g.norm();
            let clip = if norm > hyper.clip_norm { hyper.clip_norm / norm } else { 1.0 };
            let mut flat = params.to_flat();
            let gp: Vec<f64> = g.params.to_flat().iter().map(|v| v * clip).collect();
            opt.update(&mut flat, &gp);
            params.set_flat(&flat)?;
            if let Some(gw) = g.weights.take() {
                let mut dense = vec![0.0; weights.values.len()];
                for (&i, v) in chunk.iter().zip(gw) {
                    dense[i] = v * clip;
                }
                opt_w.update(&mut weights.values, &dense);
            }
            if !params.is_finite() || weights.values.iter().any(|v| !v.is_finite()) {
                stop_reason = StopReason::Divergence;
                divergence = Some(format!("non-finite parameters at epoch {epoch}"));
                break 'epochs;
            }
        }
        let val = match total_objective(&params, &val_batch, hyper) {
            Ok(v) => v,
            Err(Error::Divergence(msg)) => {
                stop_reason = StopReason::Divergence;
                divergence = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        };
        records.push(EpochRecord {
            epoch,
            train_obj: acc.0 / n as f64,
            val_obj: val.total,
            balance_term: acc.1 / n as f64,
            seconds: start.elapsed().as_secs_f64(),
        });
        let s = score(&val, hyper.stop_metric);
        if s < best.0 - IMPROVEMENT {
            best = (s, params.clone(), epoch, val);
            since = 0;
        } else {
            since += 1;
        }
        if since >= hyper.patience {
            stop_reason = StopReason::Patience;
            break;
        }
    }

    let (_, best_params, best_epoch, best_val) = best;
    let model = Model { params: best_params, grid, scaler, interpolation: hyper.interpolation };
    let report = TrainReport {
        records,
        best_epoch,
        best_val,
        stop_reason,
        divergence,
        skipped_balance_batches,
        skipped_censored_rows,
    };
    Ok(FitOutput { model, report, weights })
}
