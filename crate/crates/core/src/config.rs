//! TOML run configuration shared by every command.
//!
//! ```toml
//! seed = 7
//! out_dir = "out"
//!
//! [simulate]
//! n = 1000
//! p_wd = 2.0
//!
//! [model]
//! gamma_wd = 0.01
//!
//! [sweep]
//! gamma_wd = [0.0, 0.01, 1.0]
//! replicates = 20
//! ```
//!
//! Section-level `seed` keys are overwritten by seeds derived from the top-level
//! `seed`, so a run is determined by the file and that one number.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HyperParams;
use crate::simulate::SimConfig;
use crate::train::{SearchSpace, Selection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train: 0.6, val: 0.2, test: 0.2 }
    }
}

impl SplitConfig {
    pub fn fractions(&self) -> (f64, f64, f64) {
        (self.train, self.val, self.test)
    }
}

/// Input and output file locations; relative paths resolve against `out_dir`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset CSV (default `data.csv`).
    pub data: Option<PathBuf>,
    /// Truth scalars (default `truth_meta.toml`).
    pub truth_meta: Option<PathBuf>,
    /// Truth risk scores (default `truth_scores.csv`).
    pub truth_scores: Option<PathBuf>,
    /// Model checkpoint (default `checkpoint.txt`).
    pub checkpoint: Option<PathBuf>,
    /// Real covariates for semi-synthetic simulation; synthetic when absent.
    pub covariates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub gamma_wd: Vec<f64>,
    pub p_wd: Vec<f64>,
    pub replicates: usize,
    /// Adds a row per replicate whose `gamma_wd` is picked on the validation split.
    pub tuned: bool,
    pub selection: Selection,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { gamma_wd: vec![0.0, 0.01, 1.0], p_wd: vec![1.0], replicates: 50, tuned: false, selection: Selection::Nll }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    /// Proposal pairs for the PEHE bound.
    pub n_pairs: usize,
    /// Sampled individuals for the PEHE bound.
    pub n_x: usize,
    /// Random pairs for the Pinsker checks.
    pub n_pinsker: usize,
    pub cells: usize,
    /// Exchanges both sides of every inequality; a harness self-test that must fail.
    pub swap_sides: bool,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self { n_pairs: 100, n_x: 200, n_pinsker: 500, cells: crate::theory::FINE_CELLS, swap_sides: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub budget: usize,
    pub selection: Selection,
    pub space: SearchSpace,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { budget: 20, selection: Selection::Objective, space: SearchSpace::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Record wall-clock seconds in training reports (breaks byte-identical output).
    pub timing: bool,
    pub simulate: SimConfig,
    pub model: HyperParams,
    pub split: SplitConfig,
    pub paths: Paths,
    pub sweep: SweepConfig,
    pub theory: TheoryConfig,
    pub search: SearchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            timing: false,
            simulate: SimConfig::default(),
            model: HyperParams::default(),
            split: SplitConfig::default(),
            paths: Paths::default(),
            sweep: SweepConfig::default(),
            theory: TheoryConfig::default(),
            search: SearchConfig::default(),
        }
    }
}

/// 1-based line of byte offset `pos` in `src`.
fn line_of(src: &str, pos: usize) -> usize {
    src[..pos.min(src.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Line where `key` is assigned inside `[section]` (or at top level for `""`).
fn find_key(src: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

/// First backquoted word of a validation message.
fn quoted_key(msg: &str) -> Option<&str> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(&msg[start..start + len])
}

fn at_line(src: &str, section: &str, err: Error) -> Error {
    let Error::Config(msg) = err else { return err };
    let line = quoted_key(&msg).and_then(|k| k.split('/').find_map(|k| find_key(src, section, k)));
    let name = if section.is_empty() { String::new() } else { format!("[{section}] ") };
    match line {
        Some(l) => Error::Config(format!("line {l}: {name}{msg}")),
        None => Error::Config(format!("{name}{msg}")),
    }
}

impl RunConfig {
    /// Parses and validates; errors name the offending line.
    pub fn from_toml(src: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(src).map_err(|e| {
            let msg = e.message().to_string();
            match e.span() {
                Some(span) => Error::Config(format!("line {}: {msg}", line_of(src, span.start))),
                None => Error::Config(msg),
            }
        })?;
        cfg.validate().map_err(|e| match &e {
            Error::Config(m) if m.starts_with("[") => {
                let section = m[1..m.find(']').unwrap_or(1)].to_string();
                let rest = m[m.find(']').map_or(0, |i| i + 2)..].to_string();
                at_line(src, &section, Error::Config(rest))
            }
            _ => at_line(src, "", e),
        })?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&src).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks every section; messages start with `[section]`.
    pub fn validate(&self) -> Result<()> {
        fn tag(section: &'static str) -> impl Fn(Error) -> Error {
            move |e| match e {
                Error::Config(m) => Error::Config(format!("[{section}] {m}")),
                other => other,
            }
        }
        self.simulate.validate().map_err(tag("simulate"))?;
        self.model.validate().map_err(tag("model"))?;
        let s = &self.split;
        if !(s.train > 0.0 && s.val > 0.0 && s.test > 0.0) || (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
            return Err(tag("split")(Error::Config("`train/val/test` must be positive and sum to 1".into())));
        }
        let sw = &self.sweep;
        if sw.gamma_wd.is_empty() || sw.gamma_wd.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(tag("sweep")(Error::Config("`gamma_wd` must be a nonempty list of non-negative values".into())));
        }
        if sw.p_wd.is_empty() || sw.p_wd.iter().any(|p| !p.is_finite()) {
            return Err(tag("sweep")(Error::Config("`p_wd` must be a nonempty list of finite values".into())));
        }
        if sw.replicates == 0 {
            return Err(tag("sweep")(Error::Config("`replicates` must be at least 1".into())));
        }
        let th = &self.theory;
        if th.n_pairs == 0 || th.n_x == 0 || th.n_pinsker == 0 || th.cells < 2 {
            return Err(tag("theory")(Error::Config("`n_pairs/n_x/n_pinsker/cells` must be positive (cells >= 2)".into())));
        }
        if self.search.budget == 0 {
            return Err(tag("search")(Error::Config("`budget` must be at least 1".into())));
        }
        Ok(())
    }

    /// `path` if given, else `default`, resolved against `out_dir`.
    pub fn resolve(&self, path: &Option<PathBuf>, default: &str) -> PathBuf {
        let p = path.clone().unwrap_or_else(|| PathBuf::from(default));
        if p.is_absolute() {
            p
        } else {
            self.out_dir.join(p)
        }
    }

    pub fn data_path(&self) -> PathBuf {
        self.resolve(&self.paths.data, "data.csv")
    }

    pub fn truth_meta_path(&self) -> PathBuf {
        self.resolve(&self.paths.truth_meta, "truth_meta.toml")
    }

    pub fn truth_scores_path(&self) -> PathBuf {
        self.resolve(&self.paths.truth_scores, "truth_scores.csv")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.resolve(&self.paths.checkpoint, "checkpoint.txt")
    }
}
