//! Time grids, discrete survival outputs and interpolated survival curves.
//!
//! A grid `0 = c_0 < c_1 < ... < c_m` defines `m` intervals `I_j = (c_{j-1}, c_j]`
//! plus a beyond-horizon bin `(c_m, inf)` with index `m + 1`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    cuts: Vec<f64>,
}

impl TimeGrid {
    pub fn new(cuts: Vec<f64>) -> Result<Self> {
        if cuts.len() < 3 {
            return Err(Error::GridTooCoarse(cuts.len().saturating_sub(1)));
        }
        if cuts[0] != 0.0 {
            return Err(Error::InvalidGrid(format!("first cut must be 0, got {}", cuts[0])));
        }
        if cuts.iter().any(|c| !c.is_finite()) || cuts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("cuts must be finite and strictly increasing".into()));
        }
        Ok(Self { cuts })
    }

    pub fn cuts(&self) -> &[f64] {
        &self.cuts
    }

    /// Number of finite intervals `m`.
    pub fn m(&self) -> usize {
        self.cuts.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.cuts[self.m()]
    }

    /// Bin index `k(y)` in `1..=m+1`: the smallest `j` with `y <= c_j`, or `m+1`
    /// beyond the horizon. `y = 0` falls in the first interval.
    pub fn interval_index(&self, y: f64) -> usize {
        // first j >= 1 with y <= cuts[j]
        let pos = self.cuts[1..].partition_point(|&c| c < y);
        pos + 1
    }
}

/// Bin probabilities over `m + 1` bins with derived tail sums.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSurvivalOutput {
    probs: Vec<f64>,
}

impl DiscreteSurvivalOutput {
    pub fn new(probs: Vec<f64>) -> Self {
        Self { probs }
    }

    /// `probs()[k - 1]` is the mass of bin `k`, for `k` in `1..=m+1`.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_bins(&self) -> usize {
        self.probs.len()
    }

    /// Mass strictly after bin `k`, `k` in `0..=m+1`: 1 at `k = 0`, 0 at `k = m+1`.
    pub fn survival(&self, k: usize) -> f64 {
        assert!(k <= self.probs.len(), "bin {k} out of range");
        if k == 0 {
            return 1.0;
        }
        self.probs[k..].iter().sum::<f64>().clamp(0.0, 1.0)
    }

    /// Survival values at every cut `c_0..c_m`.
    pub fn survival_at_cuts(&self) -> Vec<f64> {
        let m1 = self.probs.len();
        let mut out = vec![0.0; m1];
        let mut tail = 0.0;
        for k in (1..m1).rev() {
            tail += self.probs[k];
            out[k] = tail.min(1.0);
        }
        out[0] = 1.0;
        out
    }
}

/// Checks normalization, nonnegativity and survival monotonicity of a discrete output.
pub fn check_discrete_output(out: &DiscreteSurvivalOutput, tol: f64) -> Result<()> {
    let p = out.probs();
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Divergence("negative or non-finite bin probability".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > tol {
        return Err(Error::Divergence(format!("bin probabilities sum to {total}")));
    }
    let s = out.survival_at_cuts();
    if s[0] != 1.0 || s.windows(2).any(|w| w[1] > w[0] + tol) {
        return Err(Error::Divergence("survival is not non-increasing from 1".into()));
    }
    if out.survival(p.len()) != 0.0 {
        return Err(Error::Divergence("survival after the last bin must be 0".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Step,
    #[default]
    Linear,
}

impl std::str::FromStr for Interpolation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(Self::Step),
            "linear" => Ok(Self::Linear),
            other => Err(Error::Config(format!("unknown interpolation `{other}`"))),
        }
    }
}

/// Survival probabilities at the grid cuts with a rule for times in between.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalCurve {
    grid: TimeGrid,
    values: Vec<f64>,
    mode: Interpolation,
}

impl SurvivalCurve {
    pub fn new(grid: TimeGrid, values: Vec<f64>, mode: Interpolation) -> Result<Self> {
        if values.len() != grid.cuts().len() {
            return Err(Error::DimensionMismatch { expected: grid.cuts().len(), got: values.len() });
        }
        if values[0] != 1.0
            || values.iter().any(|v| !(0.0..=1.0).contains(v))
            || values.windows(2).any(|w| w[1] > w[0])
        {
            return Err(Error::InvalidGrid(
                "survival values must start at 1 and be non-increasing in [0, 1]".into(),
            ));
        }
        Ok(Self { grid, values, mode })
    }

    pub fn from_output(grid: &TimeGrid, out: &DiscreteSurvivalOutput, mode: Interpolation) -> Self {
        let values = out.survival_at_cuts();
        debug_assert_eq!(values.len(), grid.cuts().len());
        Self { grid: grid.clone(), values, mode }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Survival at time `y >= 0`.
    ///
    /// Step mode reports the value at the right end of the containing interval,
    /// i.e. the mass strictly after bin `k(y)`. Linear mode interpolates between
    /// the two enclosing cuts. Past the horizon both modes return the last value,
    /// and at `y <= 0` both return 1.
    pub fn at(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return self.values[0];
        }
        let m = self.grid.m();
        let k = self.grid.interval_index(y);
        if k > m {
            return self.values[m];
        }
        match self.mode {
            Interpolation::Step => self.values[k],
            Interpolation::Linear => {
                let c = self.grid.cuts();
                let (lo, hi) = (c[k - 1], c[k]);
                let frac = ((y - lo) / (hi - lo)).clamp(0.0, 1.0);
                self.values[k - 1] + (self.values[k] - self.values[k - 1]) * frac
            }
        }
    }
}
