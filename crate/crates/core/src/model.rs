//! Representation network `phi`, treatment-conditioned head `Psi` and the softmax
//! survival output.
//!
//! `phi` maps covariates to an embedding `z` through rectified layers (the
//! embedding itself is rectified). `Psi` reads `[z, t]`, applies rectified hidden
//! layers and a linear output of size `m`. Bin `m + 1` has an implicit logit 0.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{fmt_f64, parse_f64, Standardizer};
use crate::error::{Error, Result};
use crate::grid::{DiscreteSurvivalOutput, Interpolation, SurvivalCurve, TimeGrid};

/// Dense layer `y = W x + b` with `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { w: Array2::zeros((fan_out, fan_in)), b: Array1::zeros(fan_out) }
    }

    pub fn fan_in(&self) -> usize {
        self.w.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.w.nrows()
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub phi: Vec<Layer>,
    pub psi: Vec<Layer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GridType {
    Equidistant,
    #[default]
    KmQuantile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Uniform,
    #[default]
    Propensity,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    #[default]
    Objective,
    Nll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub n_durations: usize,
    pub grid_type: GridType,
    /// Quantile of observed training times used as the last cut.
    pub grid_quantile: f64,
    pub phi_width: usize,
    pub phi_depth: usize,
    /// Embedding size; defaults to `phi_width`.
    pub embed_dim: Option<usize>,
    pub psi_width: usize,
    pub psi_depth: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lambda_r: f64,
    pub lambda_w: f64,
    pub gamma_wd: f64,
    pub sinkhorn_eps_factor: f64,
    pub sinkhorn_max_iter: usize,
    pub sinkhorn_tol: f64,
    pub interpolation: Interpolation,
    pub weight_mode: WeightMode,
    /// Censored rows beyond the last cut contribute `-log p_{m+1}` instead of 0.
    pub censored_beyond_uses_last_bin: bool,
    pub stop_metric: StopMetric,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            n_durations: 20,
            grid_type: GridType::KmQuantile,
            grid_quantile: 0.95,
            phi_width: 221,
            phi_depth: 2,
            embed_dim: None,
            psi_width: 221,
            psi_depth: 2,
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 100,
            patience: 10,
            lambda_r: 1e-4,
            lambda_w: 0.0,
            gamma_wd: 0.01,
            sinkhorn_eps_factor: 0.05,
            sinkhorn_max_iter: 200,
            sinkhorn_tol: 1e-6,
            interpolation: Interpolation::Linear,
            weight_mode: WeightMode::Propensity,
            censored_beyond_uses_last_bin: false,
            stop_metric: StopMetric::Objective,
            clip_norm: 10.0,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn embed_dim(&self) -> usize {
        self.embed_dim.unwrap_or(self.phi_width)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("`{key}` {why}")));
        if self.n_durations < 2 {
            return bad("n_durations", "must be at least 2");
        }
        if self.phi_width == 0 || self.psi_width == 0 || self.embed_dim() == 0 {
            return bad("phi_width/psi_width/embed_dim", "must be positive");
        }
        if self.phi_depth == 0 {
            return bad("phi_depth", "must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size/max_epochs", "must be positive");
        }
        for (k, v) in [("lambda_r", self.lambda_r), ("lambda_w", self.lambda_w), ("gamma_wd", self.gamma_wd)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(k, "must be finite and non-negative");
            }
        }
        if !(self.sinkhorn_eps_factor > 0.0) || !(self.sinkhorn_tol > 0.0) || self.sinkhorn_max_iter == 0 {
            return bad("sinkhorn_*", "must be positive");
        }
        if !(self.grid_quantile > 0.0 && self.grid_quantile <= 1.0) {
            return bad("grid_quantile", "must lie in (0, 1]");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm", "must be positive");
        }
        Ok(())
    }
}

/// Xavier-normal weights (`var = 2 / (fan_in + fan_out)`) and zero biases.
pub fn init_params(d: usize, m: usize, hyper: &HyperParams, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = |fan_in: usize, fan_out: usize| {
        let sd = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let normal = Normal::new(0.0, sd).expect("positive sd");
        let mut l = Layer::zeros(fan_in, fan_out);
        l.w.mapv_inplace(|_| normal.sample(&mut rng));
        l
    };
    let z = hyper.embed_dim();
    let mut phi = Vec::with_capacity(hyper.phi_depth);
    for i in 0..hyper.phi_depth {
        let fan_in = if i == 0 { d } else { hyper.phi_width };
        let fan_out = if i + 1 == hyper.phi_depth { z } else { hyper.phi_width };
        phi.push(layer(fan_in, fan_out));
    }
    let mut psi = Vec::with_capacity(hyper.psi_depth + 1);
    let mut fan_in = z + 1;
    for _ in 0..hyper.psi_depth {
        psi.push(layer(fan_in, hyper.psi_width));
        fan_in = hyper.psi_width;
    }
    psi.push(layer(fan_in, m));
    ModelParams { phi, psi }
}

fn relu(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|v| v.max(0.0))
}

/// Intermediate values of a batched forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Forward {
    pub phi_inputs: Vec<Array2<f64>>,
    pub phi_pre: Vec<Array2<f64>>,
    pub z: Array2<f64>,
    pub psi_inputs: Vec<Array2<f64>>,
    pub psi_pre: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
}

/// `log(1 + sum_j exp(psi_j))`, the log-normalizer with the implicit zero logit.
pub fn log_normalizer(logits: &[f64]) -> f64 {
    let mx = logits.iter().copied().fold(0.0f64, f64::max);
    let s: f64 = logits.iter().map(|v| (v - mx).exp()).sum::<f64>() + (-mx).exp();
    mx + s.ln()
}

/// Bin probabilities for logits `psi` (length `m`), returning `m + 1` masses.
pub fn softmax_with_zero(logits: &[f64]) -> Vec<f64> {
    let lse = log_normalizer(logits);
    logits.iter().map(|v| (v - lse).exp()).chain(std::iter::once((-lse).exp())).collect()
}

impl ModelParams {
    pub fn d(&self) -> usize {
        self.phi[0].fan_in()
    }

    pub fn m(&self) -> usize {
        self.psi.last().map_or(0, Layer::fan_out)
    }

    pub fn embed_dim(&self) -> usize {
        self.phi.last().map_or(0, Layer::fan_out)
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.phi.iter().chain(&self.psi)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.phi.iter_mut().chain(self.psi.iter_mut())
    }

    pub fn n_params(&self) -> usize {
        self.layers().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let z = |ls: &[Layer]| ls.iter().map(|l| Layer::zeros(l.fan_in(), l.fan_out())).collect();
        Self { phi: z(&self.phi), psi: z(&self.psi) }
    }

    /// All parameters, layer by layer, weights (row-major) then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in self.layers() {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch { expected: self.n_params(), got: flat.len() });
        }
        let mut it = flat.iter();
        for l in self.layers_mut() {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Euclidean norm of all head parameters.
    pub fn head_norm(&self) -> f64 {
        self.psi.iter().flat_map(|l| l.w.iter().chain(l.b.iter())).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers().all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    /// Batched embedding `phi(X)`.
    pub fn embed_batch(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        for l in &self.phi {
            h = relu(&l.apply(&h));
        }
        h
    }

    /// Embedding of a single row.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d() {
            return Err(Error::DimensionMismatch { expected: self.d(), got: x.len() });
        }
        let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("shape");
        let z = self.embed_batch(&row);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite embedding".into()));
        }
        Ok(z.into_raw_vec_and_offset().0)
    }

    /// Full forward pass keeping every intermediate.
    pub fn forward(&self, x: &Array2<f64>, t: &[u8]) -> Forward {
        let mut phi_inputs = Vec::with_capacity(self.phi.len());
        let mut phi_pre = Vec::with_capacity(self.phi.len());
        let mut h = x.clone();
        for l in &self.phi {
            let a = l.apply(&h);
            phi_inputs.push(h);
            h = relu(&a);
            phi_pre.push(a);
        }
        let z = h;
        let mut u = Array2::zeros((z.nrows(), z.ncols() + 1));
        u.slice_mut(s![.., ..z.ncols()]).assign(&z);
        for (i, &ti) in t.iter().enumerate() {
            u[[i, z.ncols()]] = ti as f64;
        }
        let mut psi_inputs = Vec::with_capacity(self.psi.len());
        let mut psi_pre = Vec::with_capacity(self.psi.len());
        let last = self.psi.len() - 1;
        for (j, l) in self.psi.iter().enumerate() {
            let a = l.apply(&u);
            psi_inputs.push(u);
            u = if j == last { a.clone() } else { relu(&a) };
            psi_pre.push(a);
        }
        Forward { phi_inputs, phi_pre, z, psi_inputs, psi_pre, logits: u }
    }

    /// Batched logits `Psi(phi(X), t)`, shape `n x m`.
    pub fn logits_batch(&self, x: &Array2<f64>, t: &[u8]) -> Array2<f64> {
        self.forward(x, t).logits
    }

    /// Reverse pass. `d_logits` is the gradient with respect to the logits and
    /// `d_z_extra` an optional extra gradient arriving at the embedding.
    pub fn backward(&self, fwd: &Forward, d_logits: &Array2<f64>, d_z_extra: Option<&Array2<f64>>) -> ModelParams {
        let mut grad = self.zeros_like();
        let mut delta = d_logits.clone();
        let last = self.psi.len() - 1;
        for j in (0..self.psi.len()).rev() {
            if j != last {
                delta.zip_mut_with(&fwd.psi_pre[j], |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            grad.psi[j].w = delta.t().dot(&fwd.psi_inputs[j]);
            grad.psi[j].b = delta.sum_axis(Axis(0));
            delta = delta.dot(&self.psi[j].w);
        }
        let zdim = fwd.z.ncols();
        let mut delta = delta.slice(s![.., ..zdim]).to_owned();
        if let Some(extra) = d_z_extra {
            delta += extra;
        }
        for j in (0..self.phi.len()).rev() {
            delta.zip_mut_with(&fwd.phi_pre[j], |d, &a| {
                if a <= 0.0 {
                    *d = 0.0
                }
            });
            grad.phi[j].w = delta.t().dot(&fwd.phi_inputs[j]);
            grad.phi[j].b = delta.sum_axis(Axis(0));
            if j > 0 {
                delta = delta.dot(&self.phi[j].w);
            }
        }
        grad
    }

    /// Logits for one row.
    pub fn logits(&self, x: &[f64], t: u8) -> Result<Vec<f64>> {
        if x.len() != self.d() {
            return Err(Error::DimensionMismatch { expected: self.d(), got: x.len() });
        }
        let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("shape");
        Ok(self.logits_batch(&row, &[t]).into_raw_vec_and_offset().0)
    }

    /// Bin probabilities `sigma^t(x)` over `m + 1` bins.
    pub fn predict_pmf(&self, x: &[f64], t: u8) -> Result<DiscreteSurvivalOutput> {
        Ok(DiscreteSurvivalOutput::new(softmax_with_zero(&self.logits(x, t)?)))
    }

    /// Mass strictly after bin `k`, `0 <= k <= m + 1`.
    pub fn predict_survival(&self, x: &[f64], t: u8, k: usize) -> Result<f64> {
        let out = self.predict_pmf(x, t)?;
        if k > out.n_bins() {
            return Err(Error::DimensionMismatch { expected: out.n_bins(), got: k });
        }
        Ok(out.survival(k))
    }
}

/// Trained model: parameters plus the grid, covariate scaler and interpolation rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: ModelParams,
    pub grid: TimeGrid,
    pub scaler: Standardizer,
    pub interpolation: Interpolation,
}

const CHECKPOINT_MAGIC: &str = "survbal-checkpoint 1";

impl Model {
    fn scaled(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.params.d() {
            return Err(Error::DimensionMismatch { expected: self.params.d(), got: x.len() });
        }
        Ok(self.scaler.transform_row(x))
    }

    pub fn predict_pmf(&self, x: &[f64], t: u8) -> Result<DiscreteSurvivalOutput> {
        self.params.predict_pmf(&self.scaled(x)?, t)
    }

    pub fn survival_curve(&self, x: &[f64], t: u8) -> Result<SurvivalCurve> {
        Ok(SurvivalCurve::from_output(&self.grid, &self.predict_pmf(x, t)?, self.interpolation))
    }

    pub fn predict_survival_at(&self, x: &[f64], t: u8, y: f64) -> Result<f64> {
        Ok(self.survival_curve(x, t)?.at(y))
    }

    /// `S_1(x, y) - S_0(x, y)`.
    pub fn predict_cate(&self, x: &[f64], y: f64) -> Result<f64> {
        Ok(self.predict_survival_at(x, 1, y)? - self.predict_survival_at(x, 0, y)?)
    }

    /// Survival curves for both arms of every row of `x` (raw covariates).
    pub fn curves_batch(&self, x: &Array2<f64>) -> [Vec<SurvivalCurve>; 2] {
        let xs = self.scaler.transform(x);
        [0u8, 1].map(|t| {
            let logits = self.params.logits_batch(&xs, &vec![t; xs.nrows()]);
            logits
                .rows()
                .into_iter()
                .map(|r| {
                    let out = DiscreteSurvivalOutput::new(softmax_with_zero(r.as_slice().expect("contiguous")));
                    SurvivalCurve::from_output(&self.grid, &out, self.interpolation)
                })
                .collect()
        })
    }

    /// Writes `i,tau,surv0,surv1,cate` for every row of `x` and time in `times`.
    pub fn write_predictions<W: Write>(&self, writer: W, x: &Array2<f64>, ids: &[usize], times: &[f64]) -> Result<()> {
        let [c0, c1] = self.curves_batch(x);
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["i", "tau", "surv0", "surv1", "cate"])?;
        for (r, &id) in ids.iter().enumerate() {
            for &tau in times {
                let (s0, s1) = (c0[r].at(tau), c1[r].at(tau));
                w.write_record([id.to_string(), fmt_f64(tau), fmt_f64(s0), fmt_f64(s1), fmt_f64(s1 - s0)])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Plain-text checkpoint; see [`Model::from_checkpoint`] for the layout.
    pub fn to_checkpoint(&self) -> String {
        let join = |it: &mut dyn Iterator<Item = &f64>| it.map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        writeln!(s, "{CHECKPOINT_MAGIC}").unwrap();
        let interp = match self.interpolation {
            Interpolation::Step => "step",
            Interpolation::Linear => "linear",
        };
        writeln!(s, "interpolation {interp}").unwrap();
        writeln!(s, "grid {} {}", self.grid.cuts().len(), join(&mut self.grid.cuts().iter())).unwrap();
        writeln!(s, "mean {} {}", self.scaler.mean.len(), join(&mut self.scaler.mean.iter())).unwrap();
        writeln!(s, "scale {} {}", self.scaler.scale.len(), join(&mut self.scaler.scale.iter())).unwrap();
        for (name, layers) in [("phi", &self.params.phi), ("psi", &self.params.psi)] {
            writeln!(s, "{name} {}", layers.len()).unwrap();
            for l in layers {
                writeln!(s, "layer {} {}", l.fan_out(), l.fan_in()).unwrap();
                writeln!(s, "{}", join(&mut l.w.iter())).unwrap();
                writeln!(s, "{}", join(&mut l.b.iter())).unwrap();
            }
        }
        s
    }

    /// Parses a checkpoint:
    ///
    /// ```text
    /// survbal-checkpoint 1
    /// interpolation <step|linear>
    /// grid <len> <cuts...>
    /// mean <d> <values...>
    /// scale <d> <values...>
    /// phi <layers>
    /// layer <out> <in>
    /// <out*in weights, row-major>
    /// <out biases>
    /// ... (same for psi)
    /// ```
    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::Parse(format!("checkpoint truncated at {what}")));
        if next("header")?.trim() != CHECKPOINT_MAGIC {
            return Err(Error::Parse("not a survbal checkpoint".into()));
        }
        let interpolation: Interpolation = field(next("interpolation")?, "interpolation")?.parse()?;
        let grid = TimeGrid::new(counted(next("grid")?, "grid")?)?;
        let mean = counted(next("mean")?, "mean")?;
        let scale = counted(next("scale")?, "scale")?;
        let mut read_layers = |name: &str| -> Result<Vec<Layer>> {
            let n: usize = field(next(name)?, name)?.parse().map_err(|_| Error::Parse(format!("bad {name} count")))?;
            (0..n)
                .map(|_| {
                    let dims: Vec<usize> = field(next("layer")?, "layer")?
                        .split_whitespace()
                        .map(|v| v.parse().map_err(|_| Error::Parse("bad layer shape".into())))
                        .collect::<Result<_>>()?;
                    let [out, inp] = dims[..] else {
                        return Err(Error::Parse("layer shape needs 2 numbers".into()));
                    };
                    let w = floats(next("weights")?)?;
                    let b = floats(next("biases")?)?;
                    if w.len() != out * inp || b.len() != out {
                        return Err(Error::Parse("layer values do not match shape".into()));
                    }
                    Ok(Layer { w: Array2::from_shape_vec((out, inp), w).expect("checked"), b: Array1::from(b) })
                })
                .collect()
        };
        let phi = read_layers("phi")?;
        let psi = read_layers("psi")?;
        if phi.is_empty() || psi.is_empty() {
            return Err(Error::Parse("checkpoint needs phi and psi layers".into()));
        }
        let params = ModelParams { phi, psi };
        if params.m() != grid.m() || mean.len() != params.d() || scale.len() != params.d() {
            return Err(Error::Parse("checkpoint shapes are inconsistent".into()));
        }
        Ok(Self { params, grid, scaler: Standardizer { mean: mean.into(), scale: scale.into() }, interpolation })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let text: String = std::io::BufReader::new(file).lines().collect::<std::io::Result<Vec<_>>>()?.join("\n");
        Self::from_checkpoint(&text)
    }
}

fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .map(str::trim)
        .ok_or_else(|| Error::Parse(format!("expected `{key}` line, found `{line}`")))
}

fn floats(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace().map(|v| parse_f64(v).map_err(Error::Parse)).collect()
}

fn counted(line: &str, key: &str) -> Result<Vec<f64>> {
    let rest = field(line, key)?;
    let (n, values) = rest.split_once(' ').unwrap_or((rest, ""));
    let n: usize = n.parse().map_err(|_| Error::Parse(format!("bad {key} length")))?;
    let v = floats(values)?;
    if v.len() != n {
        return Err(Error::Parse(format!("{key}: expected {n} values, got {}", v.len())));
    }
    Ok(v)
}
