//! End-to-end runs: simulate, train, evaluate, sweep and the theory suite.

use std::io::{Read, Write};

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{RunConfig, SplitConfig};
use crate::dataset::{fmt_f64, parse_f64, split, Dataset, SplitData};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, EvalGrid, Evaluation, MetricsRow};
use crate::model::{HyperParams, Model};
use crate::simulate::{initial_wasserstein, make_semisynthetic, make_synthetic, SimConfig, SimTruth};
use crate::theory::{check_pinsker_suite, check_theorem1, random_proposals, BoundRow, PinskerReport, Theorem1Report};
use crate::train::{fit, random_search, FitOutput, SearchResult, Selection, StopReason};

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic seed for a labelled sub-task of a run.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(master), |h, &p| mix(h ^ mix(p)))
}

const SEED_DATA: u64 = 1;
const SEED_SPLIT: u64 = 2;
const SEED_MODEL: u64 = 3;
const SEED_THEORY: u64 = 4;
const SEED_SEARCH: u64 = 5;

/// A simulated dataset tagged with its split, plus the truth and summary numbers.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub dataset: Dataset,
    pub truth: SimTruth,
    pub split: SplitData,
    pub d_wd_init: f64,
}

impl Simulated {
    pub fn censored_fraction(&self) -> f64 {
        self.dataset.censored_fraction()
    }

    pub fn treated_fraction(&self) -> f64 {
        self.dataset.treated_fraction()
    }

    /// Truth restricted to the test rows, in test order.
    pub fn test_truth(&self) -> SimTruth {
        self.truth.subset(&self.split.test_idx)
    }
}

/// Simulates, splits and measures the initial imbalance.
pub fn simulate(config: &SimConfig, covariates: Option<&Array2<f64>>, fractions: &SplitConfig, split_seed: u64) -> Result<Simulated> {
    let (dataset, truth) = match covariates {
        Some(x) => make_semisynthetic(x, config)?,
        None => make_synthetic(config)?,
    };
    let parts = split(&dataset, fractions.fractions(), split_seed)?;
    let tags = parts.tags(dataset.len());
    let dataset = dataset.with_split_tags(tags)?;
    let d_wd_init = initial_wasserstein(&dataset)?;
    Ok(Simulated { dataset, truth, split: parts, d_wd_init })
}

/// Evaluation nodes: the model cuts inside `(0, tau_min)` plus both ends.
///
/// Fails when the window holds fewer than two model cuts, which signals a
/// checkpoint trained on a different time scale than the truth.
pub fn eval_grid(model: &Model, tau_min: f64) -> Result<EvalGrid> {
    let inside = model.grid.cuts().iter().filter(|&&c| c > 0.0 && c < tau_min).count();
    if inside < 2 {
        return Err(Error::InvalidGrid(format!(
            "only {inside} model cuts fall inside the evaluation window [0, {tau_min}]"
        )));
    }
    EvalGrid::new(model.grid.cuts(), tau_min)
}

/// Scores `model` on raw covariates `x` whose rows match `truth`.
pub fn evaluate(model: &Model, x: &Array2<f64>, truth: &SimTruth) -> Result<(Evaluation, EvalGrid)> {
    if x.nrows() != truth.s_values.len() {
        return Err(Error::DimensionMismatch { expected: truth.s_values.len(), got: x.nrows() });
    }
    let grid = eval_grid(model, truth.tau_min)?;
    let ev = evaluate_model(model, x, |i, t, y| truth.survival(i, t, y), &grid)?;
    Ok((ev, grid))
}

/// Fits on the train/val splits and scores on the test split.
pub fn fit_and_evaluate(sim: &Simulated, hyper: &HyperParams) -> Result<(FitOutput, Evaluation)> {
    let out = fit(&sim.split.train, &sim.split.val, hyper)?;
    let (ev, _) = evaluate(&out.model, sim.split.test.features(), &sim.test_truth())?;
    Ok((out, ev))
}

/// Whether a sweep row comes from a fixed `gamma_wd` or from validation tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Grid,
    Tuned,
}

impl RowKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Grid => "grid",
            Self::Tuned => "tuned",
        }
    }
}

/// One replicate at one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub kind: RowKind,
    pub replicate: usize,
    /// Seed of the simulated data (shared by every `gamma_wd` of a replicate).
    pub seed: u64,
    pub gamma_wd: f64,
    pub p_wd: f64,
    pub d_wd_init: f64,
    pub mcate: f64,
    pub mpehe: f64,
    pub fsm: f64,
    /// FSM of the `gamma_wd = 0` fit on the same data.
    pub fsm_ablation: f64,
    /// Validation score used for tuning.
    pub val_score: f64,
    /// Smallest `2 (MiseSurv0^2 + MiseSurv1^2) - MiseCate^2` over test individuals.
    pub min_dominance_slack: f64,
    pub failed: bool,
}

impl SweepRow {
    pub fn run_id(&self) -> String {
        format!("{}-p{}-g{}-r{}", self.kind.as_str(), fmt_f64(self.p_wd), fmt_f64(self.gamma_wd), self.replicate)
    }

    pub fn metrics(&self) -> MetricsRow {
        MetricsRow {
            run_id: self.run_id(),
            seed: self.seed,
            gamma_wd: self.gamma_wd,
            p_wd: self.p_wd,
            d_wd_init: self.d_wd_init,
            mcate: self.mcate,
            mpehe: self.mpehe,
            fsm: self.fsm,
        }
    }
}

const SWEEP_HEADER: [&str; 14] = [
    "run_id", "kind", "replicate", "seed", "gamma_wd", "p_wd", "d_wd_init", "MCATE", "MPEHE", "FSM", "FSM_ablation",
    "val_score", "min_dominance_slack", "failed",
];

pub fn write_sweep_csv<W: Write>(writer: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        w.write_record([
            r.run_id(),
            r.kind.as_str().into(),
            r.replicate.to_string(),
            r.seed.to_string(),
            fmt_f64(r.gamma_wd),
            fmt_f64(r.p_wd),
            fmt_f64(r.d_wd_init),
            fmt_f64(r.mcate),
            fmt_f64(r.mpehe),
            fmt_f64(r.fsm),
            fmt_f64(r.fsm_ablation),
            fmt_f64(r.val_score),
            fmt_f64(r.min_dominance_slack),
            r.failed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv<R: Read>(reader: R) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != SWEEP_HEADER.len() {
            return Err(Error::Parse(format!("sweep row has {} fields", rec.len())));
        }
        let f = |i: usize| parse_f64(&rec[i]).map_err(Error::Parse);
        let bad = |i: usize| Error::Parse(format!("bad value `{}` in column {}", &rec[i], SWEEP_HEADER[i]));
        out.push(SweepRow {
            kind: match &rec[1] {
                "grid" => RowKind::Grid,
                "tuned" => RowKind::Tuned,
                _ => return Err(bad(1)),
            },
            replicate: rec[2].parse().map_err(|_| bad(2))?,
            seed: rec[3].parse().map_err(|_| bad(3))?,
            gamma_wd: f(4)?,
            p_wd: f(5)?,
            d_wd_init: f(6)?,
            mcate: f(7)?,
            mpehe: f(8)?,
            fsm: f(9)?,
            fsm_ablation: f(10)?,
            val_score: f(11)?,
            min_dominance_slack: f(12)?,
            failed: rec[13].parse().map_err(|_| bad(13))?,
        });
    }
    Ok(out)
}

/// Mean and sample standard deviation (`sd = 0` for one value, `NaN` for none).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregate of one grid point over its successful replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub kind: RowKind,
    pub gamma_wd: f64,
    pub p_wd: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    pub d_wd_init: (f64, f64),
    pub mcate: (f64, f64),
    pub mpehe: (f64, f64),
    pub fsm: (f64, f64),
    pub fsm_ablation: (f64, f64),
}

/// Groups rows by `(kind, p_wd, gamma_wd)` (tuned rows by `(kind, p_wd)`), in
/// order of first appearance.
pub fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let key = |r: &SweepRow| (r.kind, r.p_wd.to_bits(), if r.kind == RowKind::Tuned { 0 } else { r.gamma_wd.to_bits() });
    let mut keys = Vec::new();
    for r in rows {
        if !keys.contains(&key(r)) {
            keys.push(key(r));
        }
    }
    keys.into_iter()
        .map(|k| {
            let group: Vec<&SweepRow> = rows.iter().filter(|r| key(r) == k).collect();
            let ok: Vec<&SweepRow> = group.iter().copied().filter(|r| !r.failed).collect();
            let col = |f: fn(&SweepRow) -> f64| mean_sd(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                kind: k.0,
                gamma_wd: if k.0 == RowKind::Tuned { f64::NAN } else { f64::from_bits(k.2) },
                p_wd: f64::from_bits(k.1),
                n_ok: ok.len(),
                n_failed: group.len() - ok.len(),
                d_wd_init: col(|r| r.d_wd_init),
                mcate: col(|r| r.mcate),
                mpehe: col(|r| r.mpehe),
                fsm: col(|r| r.fsm),
                fsm_ablation: col(|r| r.fsm_ablation),
            }
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(writer: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "kind", "gamma_wd", "p_wd", "n_ok", "n_failed", "d_wd_init_mean", "d_wd_init_sd", "MCATE_mean", "MCATE_sd",
        "MPEHE_mean", "MPEHE_sd", "FSM_mean", "FSM_sd", "FSM_ablation_mean", "FSM_ablation_sd",
    ])?;
    for r in rows {
        let mut rec = vec![r.kind.as_str().to_string(), fmt_f64(r.gamma_wd), fmt_f64(r.p_wd)];
        rec.push(r.n_ok.to_string());
        rec.push(r.n_failed.to_string());
        for (m, s) in [r.d_wd_init, r.mcate, r.mpehe, r.fsm, r.fsm_ablation] {
            rec.push(fmt_f64(m));
            rec.push(fmt_f64(s));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-fit outcome inside a sweep job.
struct FitScore {
    gamma_wd: f64,
    val_score: f64,
    eval: Option<Evaluation>,
}

fn row(kind: RowKind, r: usize, seed: u64, p_wd: f64, d: f64, f: &FitScore, ablation: f64) -> SweepRow {
    let (mcate, mpehe, fsm, slack) = match &f.eval {
        Some(e) => {
            let slack = e
                .individuals
                .iter()
                .map(|s| 2.0 * (s.mise_surv0.powi(2) + s.mise_surv1.powi(2)) - s.mise_cate.powi(2))
                .fold(f64::INFINITY, f64::min);
            (e.mcate, e.mpehe, e.fsm, slack)
        }
        None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
    };
    SweepRow {
        kind,
        replicate: r,
        seed,
        gamma_wd: f.gamma_wd,
        p_wd,
        d_wd_init: d,
        mcate,
        mpehe,
        fsm,
        fsm_ablation: ablation,
        val_score: f.val_score,
        min_dominance_slack: slack,
        failed: f.eval.is_none(),
    }
}

/// Runs every `(p_wd, replicate)` job: one simulated dataset, one fit per
/// `gamma_wd` (plus a `gamma_wd = 0` ablation fit when 0 is not in the grid).
///
/// Replicate `r` uses the same data, split and initialization seeds at every
/// grid point, so rows are paired across `gamma_wd` and `p_wd`. Failed fits are
/// recorded with `failed = true` and the sweep continues.
pub fn sweep(cfg: &RunConfig, covariates: Option<&Array2<f64>>) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let sw = &cfg.sweep;
    let jobs: Vec<(usize, f64)> =
        sw.p_wd.iter().flat_map(|&p| (0..sw.replicates).map(move |r| (r, p))).collect();
    let mut gammas = sw.gamma_wd.clone();
    let ablation_extra = !gammas.contains(&0.0);
    if ablation_extra {
        gammas.push(0.0);
    }
    let results: Vec<Result<Vec<SweepRow>>> = jobs
        .par_iter()
        .map(|&(r, p_wd)| {
            let data_seed = derive_seed(cfg.seed, &[SEED_DATA, r as u64]);
            let sim_cfg = SimConfig { p_wd, seed: data_seed, ..cfg.simulate.clone() };
            let sim = match simulate(&sim_cfg, covariates, &cfg.split, derive_seed(cfg.seed, &[SEED_SPLIT, r as u64])) {
                Ok(s) => s,
                Err(_) => {
                    let failed = |g| FitScore { gamma_wd: g, val_score: f64::NAN, eval: None };
                    return Ok(sw
                        .gamma_wd
                        .iter()
                        .map(|&g| row(RowKind::Grid, r, data_seed, p_wd, f64::NAN, &failed(g), f64::NAN))
                        .collect());
                }
            };
            let fits: Vec<FitScore> = gammas
                .iter()
                .map(|&g| {
                    let hyper = HyperParams { gamma_wd: g, seed: derive_seed(cfg.seed, &[SEED_MODEL, r as u64]), ..cfg.model.clone() };
                    match fit_and_evaluate(&sim, &hyper) {
                        Ok((out, ev)) if !(out.report.stop_reason == StopReason::Divergence && out.report.best_epoch == 0) => {
                            let val_score = match sw.selection {
                                Selection::Objective => out.report.best_val.total,
                                Selection::Nll => out.report.best_val.nll,
                            };
                            FitScore { gamma_wd: g, val_score, eval: Some(ev) }
                        }
                        _ => FitScore { gamma_wd: g, val_score: f64::NAN, eval: None },
                    }
                })
                .collect();
            let abl = fits.iter().find(|f| f.gamma_wd == 0.0).and_then(|f| f.eval.as_ref()).map_or(f64::NAN, |e| e.fsm);
            let shown = if ablation_extra { &fits[..fits.len() - 1] } else { &fits[..] };
            let mut rows: Vec<SweepRow> =
                shown.iter().map(|f| row(RowKind::Grid, r, data_seed, p_wd, sim.d_wd_init, f, abl)).collect();
            if sw.tuned {
                let best = shown
                    .iter()
                    .filter(|f| f.eval.is_some())
                    .min_by(|a, b| a.val_score.total_cmp(&b.val_score));
                let failed = FitScore { gamma_wd: f64::NAN, val_score: f64::NAN, eval: None };
                rows.push(row(RowKind::Tuned, r, data_seed, p_wd, sim.d_wd_init, best.unwrap_or(&failed), abl));
            }
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

/// The simulation a command run uses: replicate 0 of the master seed.
pub fn simulate_run(cfg: &RunConfig, covariates: Option<&Array2<f64>>) -> Result<Simulated> {
    let sim_cfg = SimConfig { seed: derive_seed(cfg.seed, &[SEED_DATA, 0]), ..cfg.simulate.clone() };
    simulate(&sim_cfg, covariates, &cfg.split, derive_seed(cfg.seed, &[SEED_SPLIT, 0]))
}

/// Model hyperparameters with the initialization seed derived from the master seed.
pub fn run_hyper(cfg: &RunConfig) -> HyperParams {
    HyperParams { seed: derive_seed(cfg.seed, &[SEED_MODEL, 0]), ..cfg.model.clone() }
}

/// Random search over `cfg.search.space` on the train/validation splits.
pub fn search_run(cfg: &RunConfig, data: &SplitData) -> Result<SearchResult> {
    let s = &cfg.search;
    random_search(&data.train, &data.val, &run_hyper(cfg), &s.space, s.budget, derive_seed(cfg.seed, &[SEED_SEARCH, 0]), s.selection)
}

/// Results of the bound-check suite.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryOutcome {
    pub theorem1: Theorem1Report,
    pub pinsker: PinskerReport,
}

impl TheoryOutcome {
    /// Rows of every check, with the file stem each belongs to.
    pub fn tables(&self) -> Vec<(&'static str, Vec<BoundRow>)> {
        let agg = self
            .theorem1
            .aggregate
            .iter()
            .enumerate()
            .map(|(i, &report)| BoundRow { pair_id: i, x_id: usize::MAX, report })
            .collect();
        vec![
            ("theorem1", self.theorem1.rows.clone()),
            ("theorem1_pehe", agg),
            ("pinsker", self.pinsker.censored.clone()),
            ("pinsker_classical", self.pinsker.classical.clone()),
            ("cate_tv", self.pinsker.cate_tv.clone()),
        ]
    }

    /// Exchanges `lhs` and `rhs` in every report.
    pub fn swap_sides(&mut self) {
        let t = &mut self.theorem1;
        let p = &mut self.pinsker;
        let rows = t.rows.iter_mut().chain(&mut p.censored).chain(&mut p.classical).chain(&mut p.cate_tv);
        for r in rows.map(|r| &mut r.report).chain(&mut t.aggregate) {
            std::mem::swap(&mut r.lhs, &mut r.rhs);
        }
    }

    pub fn violations(&self) -> usize {
        self.tables().iter().map(|(_, rows)| rows.iter().filter(|r| !r.report.holds()).count()).sum()
    }
}

/// Simulates the configured truth, samples `n_x` individuals and runs the PEHE
/// bound and Pinsker checks.
pub fn run_theory(cfg: &RunConfig) -> Result<TheoryOutcome> {
    let th = &cfg.theory;
    let sim_cfg = SimConfig { seed: derive_seed(cfg.seed, &[SEED_THEORY, 0]), ..cfg.simulate.clone() };
    let (_, truth) = make_synthetic(&sim_cfg)?;
    let n = truth.s_values.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[SEED_THEORY, 1]));
    let scores: Vec<f64> = sample(&mut rng, n, th.n_x.min(n)).into_iter().map(|i| truth.s_values[i]).collect();
    let proposals = random_proposals(th.n_pairs, derive_seed(cfg.seed, &[SEED_THEORY, 2]));
    let theorem1 = check_theorem1(&truth, &scores, &proposals, th.cells)?;
    let pinsker = check_pinsker_suite(&truth, &scores, th.n_pinsker, derive_seed(cfg.seed, &[SEED_THEORY, 3]), th.cells)?;
    let mut out = TheoryOutcome { theorem1, pinsker };
    if th.swap_sides {
        out.swap_sides();
    }
    Ok(out)
}
