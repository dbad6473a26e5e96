//! Numerical checks of the bound chain linking the excess risk to the PEHE.
//!
//! Densities are piecewise constant on a fine uniform grid over `[0, tau]`, built
//! from survival functions evaluated at the grid nodes. The joint law of the
//! observed `(Y^c, delta)` restricted to the window is
//!
//! * event in cell `j`: `(F_j - F_{j+1}) (H_j + H_{j+1}) / 2`,
//! * censoring in cell `j`: `(H_j - H_{j+1}) (F_j + F_{j+1}) / 2`,
//! * still at risk at `tau`: `F_N H_N`,
//!
//! which sums to 1 exactly, so the discrete Pinsker inequality applies verbatim.

use std::borrow::Cow;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{fmt_f64, parse_f64};
use crate::error::{Error, Result};
use crate::simulate::SimTruth;

/// Number of cells of the verification grid.
pub const FINE_CELLS: usize = 2000;
/// Floor applied to candidate densities and survival values before taking logs.
pub const DENSITY_FLOOR: f64 = 1e-12;
/// Additive tolerance of every bound check.
pub const BOUND_TOL: f64 = 1e-6;
/// Smallest admissible `eta`.
pub const ETA_MIN: f64 = 1e-6;

/// Candidate and true event-time laws plus the true censoring law on `[0, tau]`,
/// stored as survival values at the `cells + 1` grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityPair<'a> {
    tau: f64,
    cand: Cow<'a, [f64]>,
    truth: Cow<'a, [f64]>,
    cens: Cow<'a, [f64]>,
}

fn check_curve(name: &str, v: &[f64]) -> Result<()> {
    if v.first() != Some(&1.0) {
        return Err(Error::Config(format!("{name} survival must start at 1")));
    }
    if v.iter().any(|x| !(0.0..=1.0).contains(x)) || v.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::Config(format!("{name} survival must be non-increasing in [0, 1]")));
    }
    Ok(())
}

/// Survival values at the nodes `j tau / cells`, `j = 0..=cells`.
pub fn nodes(f: impl Fn(f64) -> f64, tau: f64, cells: usize) -> Vec<f64> {
    (0..=cells).map(|j| f(tau * j as f64 / cells as f64)).collect()
}

impl<'a> DensityPair<'a> {
    pub fn new(
        tau: f64,
        cand: impl Into<Cow<'a, [f64]>>,
        truth: impl Into<Cow<'a, [f64]>>,
        cens: impl Into<Cow<'a, [f64]>>,
    ) -> Result<Self> {
        let (cand, truth, cens) = (cand.into(), truth.into(), cens.into());
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("window end must be positive, got {tau}")));
        }
        if cand.len() < 2 || cand.len() != truth.len() || cand.len() != cens.len() {
            return Err(Error::DimensionMismatch { expected: truth.len(), got: cand.len() });
        }
        check_curve("candidate", &cand)?;
        check_curve("true", &truth)?;
        check_curve("censoring", &cens)?;
        Ok(Self { tau, cand, truth, cens })
    }

    /// Pair built by evaluating survival functions on `cells` equal cells.
    pub fn from_survival(
        cand: impl Fn(f64) -> f64,
        truth: impl Fn(f64) -> f64,
        cens: impl Fn(f64) -> f64,
        tau: f64,
        cells: usize,
    ) -> Result<DensityPair<'static>> {
        DensityPair::new(tau, nodes(cand, tau, cells), nodes(truth, tau, cells), nodes(cens, tau, cells))
    }

    /// The pair whose candidate is the truth.
    pub fn oracle(&self) -> DensityPair<'_> {
        DensityPair { tau: self.tau, cand: Cow::Borrowed(&self.truth), truth: Cow::Borrowed(&self.truth), cens: Cow::Borrowed(&self.cens) }
    }

    /// The same pair with censoring removed (`H* = 1`).
    pub fn uncensored(&self) -> DensityPair<'_> {
        DensityPair {
            tau: self.tau,
            cand: Cow::Borrowed(&self.cand),
            truth: Cow::Borrowed(&self.truth),
            cens: Cow::Owned(vec![1.0; self.cens.len()]),
        }
    }

    pub fn cells(&self) -> usize {
        self.cand.len() - 1
    }

    pub fn step(&self) -> f64 {
        self.tau / self.cells() as f64
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Candidate event mass per cell.
    pub fn candidate_masses(&self) -> Vec<f64> {
        self.cand.windows(2).map(|w| w[0] - w[1]).collect()
    }

    pub fn truth_masses(&self) -> Vec<f64> {
        self.truth.windows(2).map(|w| w[0] - w[1]).collect()
    }

    /// `H*(tau)`.
    pub fn censoring_at_end(&self) -> f64 {
        *self.cens.last().expect("non-empty")
    }

    /// `1 - F(tau)` of the candidate.
    pub fn candidate_end(&self) -> f64 {
        *self.cand.last().expect("non-empty")
    }

    pub fn truth_end(&self) -> f64 {
        *self.truth.last().expect("non-empty")
    }
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Expected negative log-likelihood of the candidate under the true law of
/// `(Y^c, delta)` on the window, including the at-risk atom at `tau`.
pub fn pointwise_loss(pair: &DensityPair) -> f64 {
    let h = pair.step();
    let (f, fs, hs) = (&pair.cand, &pair.truth, &pair.cens);
    let mut loss = 0.0;
    for j in 0..pair.cells() {
        let hbar = 0.5 * (hs[j] + hs[j + 1]);
        let event = (fs[j] - fs[j + 1]) * hbar;
        let censor = (hs[j] - hs[j + 1]) * 0.5 * (fs[j] + fs[j + 1]);
        let density = ((f[j] - f[j + 1]) / h).max(DENSITY_FLOOR);
        let surv = (0.5 * (f[j] + f[j + 1])).max(DENSITY_FLOOR);
        loss -= xlogy(event, density) + xlogy(censor, surv);
    }
    let atom = fs[pair.cells()] * hs[pair.cells()];
    loss - xlogy(atom, f[pair.cells()].max(DENSITY_FLOOR))
}

/// `KL_x = loss(candidate) - loss(truth)`.
pub fn kl_x(pair: &DensityPair) -> f64 {
    pointwise_loss(pair) - pointwise_loss(&pair.oracle())
}

/// Joint observation masses `(events, censorings, atom)` with the true censoring law.
/// `floor` is the cell width when candidate flooring applies.
fn joint_masses(surv: &[f64], cens: &[f64], floor: Option<f64>) -> (Vec<f64>, Vec<f64>, f64) {
    let n = surv.len() - 1;
    let mut ev = Vec::with_capacity(n);
    let mut ce = Vec::with_capacity(n);
    for j in 0..n {
        let (mut p, mut s) = (surv[j] - surv[j + 1], 0.5 * (surv[j] + surv[j + 1]));
        if let Some(h) = floor {
            p = p.max(DENSITY_FLOOR * h);
            s = s.max(DENSITY_FLOOR);
        }
        ev.push(p * 0.5 * (cens[j] + cens[j + 1]));
        ce.push((cens[j] - cens[j + 1]) * s);
    }
    let end = if floor.is_some() { surv[n].max(DENSITY_FLOOR) } else { surv[n] };
    (ev, ce, end * cens[n])
}

/// KL between the joint laws of `(Y^c, delta)`, computed directly.
pub fn kl_joint(pair: &DensityPair) -> f64 {
    let (e1, c1, a1) = joint_masses(&pair.truth, &pair.cens, None);
    let (e2, c2, a2) = joint_masses(&pair.cand, &pair.cens, Some(pair.step()));
    let term = |p: f64, q: f64| if p == 0.0 { 0.0 } else { p * (p / q).ln() };
    let mut kl = term(a1, a2);
    for j in 0..e1.len() {
        kl += term(e1[j], e2[j]) + term(c1[j], c2[j]);
    }
    kl
}

/// Total variation `½ Σ |a_j - b_j|` between cell masses.
pub fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Total variation between candidate and true densities on the window.
pub fn tv_x(pair: &DensityPair) -> f64 {
    tv(&pair.candidate_masses(), &pair.truth_masses())
}

/// Two sides of one inequality `lhs <= rhs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
}

impl BoundReport {
    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }

    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs + BOUND_TOL
    }
}

/// `eta = H*(tau)`, rejected when not bounded away from 0.
pub fn eta(pair: &DensityPair) -> Result<f64> {
    let e = pair.censoring_at_end();
    if e < ETA_MIN {
        return Err(Error::Config(format!("censoring survival at the window end is {e}; shorten the window")));
    }
    Ok(e)
}

/// `tv_x <= sqrt(KL_x / 2) / H*(tau)`.
pub fn check_pinsker(pair: &DensityPair) -> Result<BoundReport> {
    let e = eta(pair)?;
    Ok(BoundReport { lhs: tv_x(pair), rhs: (kl_x(pair).max(0.0) / 2.0).sqrt() / e })
}

/// `CATE = S_1(tau) - S_0(tau)` for the candidates and the truths.
pub fn cate_gap(pair0: &DensityPair, pair1: &DensityPair) -> f64 {
    (pair1.candidate_end() - pair0.candidate_end()) - (pair1.truth_end() - pair0.truth_end())
}

/// `gap^2 / 8 <= tv_0^2 + tv_1^2`.
pub fn check_cate_tv(pair0: &DensityPair, pair1: &DensityPair) -> BoundReport {
    BoundReport { lhs: cate_gap(pair0, pair1).powi(2) / 8.0, rhs: tv_x(pair0).powi(2) + tv_x(pair1).powi(2) }
}

/// Rate perturbations `(u_0, u_1)`: the arm-`t` proposal is the true Weibull with
/// rate `lambda exp(u_t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub u: [f64; 2],
}

/// `n` proposals with `u ~ Uniform(-0.5, 0.5)`.
pub fn random_proposals(n: usize, seed: u64) -> Vec<Proposal> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Proposal { u: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)] }).collect()
}

/// Survival nodes of the truth for score `s` and arm `t` on `[0, tau_min]`.
fn truth_nodes(truth: &SimTruth, s: f64, t: u8, cells: usize) -> Vec<f64> {
    nodes(|y| truth.survival_for_score(s, t, y), truth.tau_min, cells)
}

/// The rate change `lambda -> lambda e^u` raises a Weibull survival to `e^(u alpha)`.
fn perturbed(truth_nodes: &[f64], u: f64, alpha: f64) -> Vec<f64> {
    let k = (u * alpha).exp();
    truth_nodes.iter().map(|&v| (k * v.ln()).exp()).collect()
}

/// One row of a bound report file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundRow {
    pub pair_id: usize,
    pub x_id: usize,
    pub report: BoundReport,
}

/// Per-`x` rows and the averaged PEHE bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Report {
    /// `gap(x)^2 <= 4 / eta^2 (KL_0(x) + KL_1(x))` for every proposal and `x`.
    pub rows: Vec<BoundRow>,
    /// `PEHE <= 4 / eta^2 (ER_0 + ER_1)` per proposal.
    pub aggregate: Vec<BoundReport>,
    pub eta: f64,
}

/// Checks the PEHE bound for each proposal, with expectations over `scores`
/// (risk scores `s(x)` of sampled individuals) and `eta = exp(-lambda_c tau_min)`.
pub fn check_theorem1(truth: &SimTruth, scores: &[f64], proposals: &[Proposal], cells: usize) -> Result<Theorem1Report> {
    if scores.is_empty() || proposals.is_empty() {
        return Err(Error::Empty("no individuals or proposals"));
    }
    let cens = nodes(|y| truth.censoring_survival(y), truth.tau_min, cells);
    let eta = *cens.last().expect("non-empty");
    if eta < ETA_MIN {
        return Err(Error::Config(format!("eta = {eta} is not bounded away from 0")));
    }
    let truths: Vec<[Vec<f64>; 2]> =
        scores.par_iter().map(|&s| [truth_nodes(truth, s, 0, cells), truth_nodes(truth, s, 1, cells)]).collect();
    let per_pair: Vec<Result<(Vec<BoundRow>, BoundReport)>> = proposals
        .par_iter()
        .enumerate()
        .map(|(pid, prop)| {
            let mut rows = Vec::with_capacity(scores.len());
            let (mut pehe, mut er) = (0.0, 0.0);
            for (xid, tr) in truths.iter().enumerate() {
                let c0 = perturbed(&tr[0], prop.u[0], truth.alpha);
                let c1 = perturbed(&tr[1], prop.u[1], truth.alpha);
                let p0 = DensityPair::new(truth.tau_min, c0, tr[0].as_slice(), cens.as_slice())?;
                let p1 = DensityPair::new(truth.tau_min, c1, tr[1].as_slice(), cens.as_slice())?;
                let gap2 = cate_gap(&p0, &p1).powi(2);
                let kl = kl_x(&p0) + kl_x(&p1);
                pehe += gap2;
                er += kl;
                rows.push(BoundRow { pair_id: pid, x_id: xid, report: BoundReport { lhs: gap2, rhs: 4.0 / (eta * eta) * kl } });
            }
            let n = scores.len() as f64;
            Ok((rows, BoundReport { lhs: pehe / n, rhs: 4.0 / (eta * eta) * er / n }))
        })
        .collect();
    let mut rows = Vec::with_capacity(proposals.len() * scores.len());
    let mut aggregate = Vec::with_capacity(proposals.len());
    for r in per_pair {
        let (rw, agg) = r?;
        rows.extend(rw);
        aggregate.push(agg);
    }
    Ok(Theorem1Report { rows, aggregate, eta })
}

/// Pinsker-type checks on random single-arm pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PinskerReport {
    /// Censored form.
    pub censored: Vec<BoundRow>,
    /// Classical form with `H* = 1`.
    pub classical: Vec<BoundRow>,
    /// `gap^2 / 8 <= tv_0^2 + tv_1^2`, one row per pair.
    pub cate_tv: Vec<BoundRow>,
}

/// Draws `n_pairs` (individual, proposal) pairs and checks the Pinsker chain in
/// both arms.
pub fn check_pinsker_suite(truth: &SimTruth, scores: &[f64], n_pairs: usize, seed: u64, cells: usize) -> Result<PinskerReport> {
    if scores.is_empty() {
        return Err(Error::Empty("no individuals"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let draws: Vec<(usize, Proposal)> = (0..n_pairs)
        .map(|_| (rng.random_range(0..scores.len()), Proposal { u: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)] }))
        .collect();
    let cens = nodes(|y| truth.censoring_survival(y), truth.tau_min, cells);
    let rows: Vec<Result<[BoundRow; 5]>> = draws
        .par_iter()
        .enumerate()
        .map(|(pid, &(xid, prop))| {
            let s = scores[xid];
            let tr = [truth_nodes(truth, s, 0, cells), truth_nodes(truth, s, 1, cells)];
            let p0 = DensityPair::new(truth.tau_min, perturbed(&tr[0], prop.u[0], truth.alpha), tr[0].as_slice(), cens.as_slice())?;
            let p1 = DensityPair::new(truth.tau_min, perturbed(&tr[1], prop.u[1], truth.alpha), tr[1].as_slice(), cens.as_slice())?;
            let row = |report| BoundRow { pair_id: pid, x_id: xid, report };
            Ok([
                row(check_pinsker(&p0)?),
                row(check_pinsker(&p1)?),
                row(check_pinsker(&p0.uncensored())?),
                row(check_pinsker(&p1.uncensored())?),
                row(check_cate_tv(&p0, &p1)),
            ])
        })
        .collect();
    let mut out = PinskerReport { censored: Vec::new(), classical: Vec::new(), cate_tv: Vec::new() };
    for r in rows {
        let [a, b, c, d, e] = r?;
        out.censored.extend([a, b]);
        out.classical.extend([c, d]);
        out.cate_tv.push(e);
    }
    Ok(out)
}

/// Writes `pair_id,x_id,lhs,rhs,slack,holds`.
pub fn write_bound_csv<W: Write>(writer: W, rows: &[BoundRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["pair_id", "x_id", "lhs", "rhs", "slack", "holds"])?;
    for r in rows {
        w.write_record([
            r.pair_id.to_string(),
            r.x_id.to_string(),
            fmt_f64(r.report.lhs),
            fmt_f64(r.report.rhs),
            fmt_f64(r.report.slack()),
            r.report.holds().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows back; the `holds` column is recomputed and checked for consistency.
pub fn read_bound_csv<R: Read>(reader: R) -> Result<Vec<BoundRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 6 {
            return Err(Error::Parse(format!("bound row has {} fields", rec.len())));
        }
        let int = |i: usize| rec[i].parse::<usize>().map_err(|_| Error::Parse(format!("bad integer `{}`", &rec[i])));
        let report = BoundReport { lhs: parse_f64(&rec[2]).map_err(Error::Parse)?, rhs: parse_f64(&rec[3]).map_err(Error::Parse)? };
        let holds: bool = rec[5].parse().map_err(|_| Error::Parse(format!("bad flag `{}`", &rec[5])))?;
        if holds != report.holds() {
            return Err(Error::Parse(format!("`holds` flag disagrees with lhs/rhs in row {}", out.len() + 1)));
        }
        out.push(BoundRow { pair_id: int(0)?, x_id: int(1)?, report });
    }
    Ok(out)
}
