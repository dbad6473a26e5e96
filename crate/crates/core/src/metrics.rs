//! Evaluation scores against known ground truth.
//!
//! All integrals over `[0, tau_min]` use the trapezoid rule on an [`EvalGrid`].

use std::io::{Read, Write};

use ndarray::Array2;

use crate::dataset::{fmt_f64, parse_f64};
use crate::error::{Error, Result};
use crate::model::Model;

/// Quadrature nodes on `[0, tau_min]` with trapezoid weights summing to `tau_min`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalGrid {
    times: Vec<f64>,
    weights: Vec<f64>,
}

impl EvalGrid {
    /// Nodes `{0} ∪ {c in cuts : 0 < c < tau_min} ∪ {tau_min}`.
    pub fn new(cuts: &[f64], tau_min: f64) -> Result<Self> {
        if !(tau_min > 0.0 && tau_min.is_finite()) {
            return Err(Error::InvalidGrid(format!("tau_min must be positive, got {tau_min}")));
        }
        let mut times = vec![0.0];
        let mut inner: Vec<f64> = cuts.iter().copied().filter(|&c| c > 0.0 && c < tau_min).collect();
        inner.sort_by(f64::total_cmp);
        inner.dedup();
        times.extend(inner);
        times.push(tau_min);
        Ok(Self::from_times(times))
    }

    /// `n` equal subintervals of `[0, tau_min]`.
    pub fn uniform(tau_min: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::GridTooCoarse(0));
        }
        let cuts: Vec<f64> = (1..n).map(|j| j as f64 * tau_min / n as f64).collect();
        Self::new(&cuts, tau_min)
    }

    fn from_times(times: Vec<f64>) -> Self {
        let n = times.len();
        let mut weights = vec![0.0; n];
        for j in 0..n - 1 {
            let h = times[j + 1] - times[j];
            weights[j] += 0.5 * h;
            weights[j + 1] += 0.5 * h;
        }
        Self { times, weights }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn tau_min(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }

    /// Trapezoid integral of `f` over the window.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.times.iter().zip(&self.weights).map(|(&t, &w)| w * f(t)).sum()
    }
}

/// `||S_pred - S_true||` over the window (square root of the quadrature).
pub fn mise_surv(pred: impl Fn(f64) -> f64, truth: impl Fn(f64) -> f64, grid: &EvalGrid) -> f64 {
    grid.integrate(|y| (pred(y) - truth(y)).powi(2)).max(0.0).sqrt()
}

/// `||CATE_pred - CATE_true||` over the window.
pub fn mise_cate(pred: impl Fn(f64) -> f64, truth: impl Fn(f64) -> f64, grid: &EvalGrid) -> f64 {
    mise_surv(pred, truth, grid)
}

/// Scores of one individual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndividualScores {
    pub mise_surv0: f64,
    pub mise_surv1: f64,
    pub mise_cate: f64,
}

impl IndividualScores {
    /// `sqrt(MiseSurv0^2 + MiseSurv1^2)`.
    pub fn fsmise(&self) -> f64 {
        (self.mise_surv0.powi(2) + self.mise_surv1.powi(2)).sqrt()
    }

    /// `MiseCate^2 <= 2 (MiseSurv0^2 + MiseSurv1^2)`.
    pub fn dominance_holds(&self) -> bool {
        self.mise_cate.powi(2) <= 2.0 * (self.mise_surv0.powi(2) + self.mise_surv1.powi(2))
    }
}

/// `(MCATE, FSM)`: means of MiseCate and FSMise.
pub fn aggregate(scores: &[IndividualScores]) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::Empty("no individuals to aggregate"));
    }
    let n = scores.len() as f64;
    let mcate = scores.iter().map(|s| s.mise_cate).sum::<f64>() / n;
    let fsm = scores.iter().map(IndividualScores::fsmise).sum::<f64>() / n;
    Ok((mcate, fsm))
}

/// Mean squared difference between two `n x m` CATE matrices.
pub fn mpehe(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(Error::DimensionMismatch { expected: truth.len(), got: pred.len() });
    }
    if pred.is_empty() {
        return Err(Error::Empty("empty CATE matrix"));
    }
    Ok((pred - truth).mapv(|d| d * d).mean().expect("non-empty"))
}

/// Scores of every individual plus the aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub individuals: Vec<IndividualScores>,
    pub mcate: f64,
    pub fsm: f64,
    pub mpehe: f64,
}

impl Evaluation {
    /// Writes `i,mise_surv0_sq,mise_surv1_sq,fsmise_sq,mise_cate_sq`.
    pub fn write_squares_csv<W: Write>(&self, writer: W, ids: &[usize]) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["i", "mise_surv0_sq", "mise_surv1_sq", "fsmise_sq", "mise_cate_sq"])?;
        for (s, id) in self.individuals.iter().zip(ids) {
            w.write_record([
                id.to_string(),
                fmt_f64(s.mise_surv0.powi(2)),
                fmt_f64(s.mise_surv1.powi(2)),
                fmt_f64(s.fsmise().powi(2)),
                fmt_f64(s.mise_cate.powi(2)),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores predicted survival curves against a truth function `truth(row, t, y)`.
///
/// `pred(row, t, y)` and `truth` are evaluated on the grid nodes; MPEHE uses every
/// node except `y = 0`, where both CATEs vanish.
pub fn evaluate_curves(
    n: usize,
    pred: impl Fn(usize, u8, f64) -> f64,
    truth: impl Fn(usize, u8, f64) -> f64,
    grid: &EvalGrid,
) -> Result<Evaluation> {
    let times = &grid.times()[1..];
    let mut cate_pred = Array2::zeros((n, times.len()));
    let mut cate_true = Array2::zeros((n, times.len()));
    let mut individuals = Vec::with_capacity(n);
    for i in 0..n {
        let p = |t: u8| grid.times().iter().map(|&y| pred(i, t, y)).collect::<Vec<_>>();
        let q = |t: u8| grid.times().iter().map(|&y| truth(i, t, y)).collect::<Vec<_>>();
        let (p0, p1, q0, q1) = (p(0), p(1), q(0), q(1));
        let quad = |f: &dyn Fn(usize) -> f64| grid.weights().iter().enumerate().map(|(k, w)| w * f(k)).sum::<f64>().max(0.0).sqrt();
        individuals.push(IndividualScores {
            mise_surv0: quad(&|k| (p0[k] - q0[k]).powi(2)),
            mise_surv1: quad(&|k| (p1[k] - q1[k]).powi(2)),
            mise_cate: quad(&|k| ((p1[k] - p0[k]) - (q1[k] - q0[k])).powi(2)),
        });
        for k in 0..times.len() {
            cate_pred[[i, k]] = p1[k + 1] - p0[k + 1];
            cate_true[[i, k]] = q1[k + 1] - q0[k + 1];
        }
    }
    let (mcate, fsm) = aggregate(&individuals)?;
    let mpehe = mpehe(&cate_pred, &cate_true)?;
    Ok(Evaluation { individuals, mcate, fsm, mpehe })
}

/// Evaluates a model on raw covariates `x` against `truth(row, t, y)`.
pub fn evaluate_model(
    model: &Model,
    x: &Array2<f64>,
    truth: impl Fn(usize, u8, f64) -> f64,
    grid: &EvalGrid,
) -> Result<Evaluation> {
    let [c0, c1] = model.curves_batch(x);
    evaluate_curves(x.nrows(), |i, t, y| if t == 1 { c1[i].at(y) } else { c0[i].at(y) }, truth, grid)
}

/// One row of the per-run metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub gamma_wd: f64,
    pub p_wd: f64,
    pub d_wd_init: f64,
    pub mcate: f64,
    pub mpehe: f64,
    pub fsm: f64,
}

pub const METRICS_HEADER: [&str; 8] = ["run_id", "seed", "gamma_wd", "p_wd", "d_wd_init", "MCATE", "MPEHE", "FSM"];

/// Writes `run_id,seed,gamma_wd,p_wd,d_wd_init,MCATE,MPEHE,FSM`.
pub fn write_metrics_csv<W: Write>(writer: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.run_id.clone(),
            r.seed.to_string(),
            fmt_f64(r.gamma_wd),
            fmt_f64(r.p_wd),
            fmt_f64(r.d_wd_init),
            fmt_f64(r.mcate),
            fmt_f64(r.mpehe),
            fmt_f64(r.fsm),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(reader: R) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != METRICS_HEADER.len() {
            return Err(Error::Parse(format!("metrics row has {} fields", rec.len())));
        }
        let f = |i: usize| parse_f64(&rec[i]).map_err(Error::Parse);
        out.push(MetricsRow {
            run_id: rec[0].to_string(),
            seed: rec[1].parse().map_err(|_| Error::Parse(format!("bad seed `{}`", &rec[1])))?,
            gamma_wd: f(2)?,
            p_wd: f(3)?,
            d_wd_init: f(4)?,
            mcate: f(5)?,
            mpehe: f(6)?,
            fsm: f(7)?,
        });
    }
    Ok(out)
}
