//! Observational survival data: validation, splitting, standardization and CSV I/O.
//!
//! A [`Dataset`] holds `n` rows of covariates `x`, a binary treatment `t`, an
//! observed time `y = min(Y, C)` and an event indicator `delta = 1{Y <= C}`.
//! Values are validated once on construction and never mutated afterwards.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Which partition a row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split tag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    treatment: Vec<u8>,
    time: Vec<f64>,
    event: Vec<u8>,
    split: Option<Vec<Split>>,
}

fn as_binary(row: usize, column: &'static str, value: f64) -> Result<u8> {
    if value == 0.0 {
        Ok(0)
    } else if value == 1.0 {
        Ok(1)
    } else {
        Err(Error::NonBinary { row, column, value })
    }
}

impl Dataset {
    /// Validates and builds a dataset. Treatment and event must be exactly 0 or 1.
    pub fn new(
        features: Array2<f64>,
        treatment: &[f64],
        time: &[f64],
        event: &[f64],
    ) -> Result<Self> {
        let n = features.nrows();
        for (len, _) in [(treatment.len(), "t"), (time.len(), "y"), (event.len(), "delta")] {
            if len != n {
                return Err(Error::DimensionMismatch { expected: n, got: len });
            }
        }
        for ((i, j), v) in features.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite { row: i, column: j });
            }
        }
        let mut t = Vec::with_capacity(n);
        let mut d = Vec::with_capacity(n);
        for i in 0..n {
            if !time[i].is_finite() {
                return Err(Error::NonFinite { row: i, column: features.ncols() + 1 });
            }
            if time[i] < 0.0 {
                return Err(Error::NegativeTime { row: i, value: time[i] });
            }
            t.push(as_binary(i, "t", treatment[i])?);
            d.push(as_binary(i, "delta", event[i])?);
        }
        if !t.contains(&1) {
            return Err(Error::EmptyArm("treated"));
        }
        if !t.contains(&0) {
            return Err(Error::EmptyArm("control"));
        }
        Ok(Self {
            features,
            treatment: t,
            time: time.to_vec(),
            event: d,
            split: None,
        })
    }

    /// Builds a dataset from raw rows laid out as `x0..x{d-1}, t, y, delta`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty("dataset has no rows"))?;
        if first.len() < 4 {
            return Err(Error::DimensionMismatch { expected: 4, got: first.len() });
        }
        let d = first.len() - 3;
        let mut features = Array2::zeros((rows.len(), d));
        let (mut t, mut y, mut delta) = (vec![], vec![], vec![]);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d + 3 {
                return Err(Error::DimensionMismatch { expected: d + 3, got: row.len() });
            }
            for j in 0..d {
                features[[i, j]] = row[j];
            }
            t.push(row[d]);
            y.push(row[d + 1]);
            delta.push(row[d + 2]);
        }
        Self::new(features, &t, &y, &delta)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn treatment(&self) -> &[u8] {
        &self.treatment
    }

    pub fn time(&self) -> &[f64] {
        &self.time
    }

    pub fn event(&self) -> &[u8] {
        &self.event
    }

    pub fn split_tags(&self) -> Option<&[Split]> {
        self.split.as_deref()
    }

    pub fn with_split_tags(mut self, tags: Vec<Split>) -> Result<Self> {
        if tags.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: tags.len() });
        }
        self.split = Some(tags);
        Ok(self)
    }

    pub fn n_treated(&self) -> usize {
        self.treatment.iter().filter(|&&t| t == 1).count()
    }

    pub fn treated_fraction(&self) -> f64 {
        self.n_treated() as f64 / self.len() as f64
    }

    pub fn censored_fraction(&self) -> f64 {
        self.event.iter().filter(|&&d| d == 0).count() as f64 / self.len() as f64
    }

    /// Rows at `idx`, in the given order. Fails if a treatment arm ends up empty.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let features = self.features.select(Axis(0), idx);
        let t: Vec<f64> = idx.iter().map(|&i| self.treatment[i] as f64).collect();
        let y: Vec<f64> = idx.iter().map(|&i| self.time[i]).collect();
        let d: Vec<f64> = idx.iter().map(|&i| self.event[i] as f64).collect();
        let mut out = Self::new(features, &t, &y, &d)?;
        if let Some(tags) = &self.split {
            out.split = Some(idx.iter().map(|&i| tags[i]).collect());
        }
        Ok(out)
    }

    /// Same rows with the covariates replaced (e.g. after standardization).
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        if features.dim() != self.features.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.features.len(),
                got: features.len(),
            });
        }
        let mut out = self.clone();
        out.features = features;
        Ok(out)
    }

    /// Indices of rows carrying `tag`, in row order.
    pub fn indices_of(&self, tag: Split) -> Vec<usize> {
        match &self.split {
            Some(tags) => (0..self.len()).filter(|&i| tags[i] == tag).collect(),
            None => Vec::new(),
        }
    }

    /// Splits into train/val/test according to the stored split tags.
    pub fn partition_by_tags(&self) -> Result<SplitData> {
        if self.split.is_none() {
            return Err(Error::Parse("dataset carries no split column".into()));
        }
        let train_idx = self.indices_of(Split::Train);
        let val_idx = self.indices_of(Split::Val);
        let test_idx = self.indices_of(Split::Test);
        Ok(SplitData {
            train: self.select(&train_idx)?,
            val: self.select(&val_idx)?,
            test: self.select(&test_idx)?,
            train_idx,
            val_idx,
            test_idx,
        })
    }

    /// Writes the dataset as CSV with header `x0,...,x{d-1},t,y,delta[,split]`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.n_features()).map(|j| format!("x{j}")).collect();
        header.extend(["t", "y", "delta"].map(String::from));
        if self.split.is_some() {
            header.push("split".into());
        }
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(|v| fmt_f64(*v)).collect();
            rec.push(self.treatment[i].to_string());
            rec.push(fmt_f64(self.time[i]));
            rec.push(self.event[i].to_string());
            if let Some(tags) = &self.split {
                rec.push(tags[i].as_str().into());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let has_split = header.last().map(|h| h == "split").unwrap_or(false);
        let n_num = header.len() - usize::from(has_split);
        if n_num < 4 || header[n_num - 3..n_num] != ["t", "y", "delta"] {
            return Err(Error::Parse(
                "header must end with `t,y,delta` (optionally followed by `split`)".into(),
            ));
        }
        let mut rows = Vec::new();
        let mut tags = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Parse(format!("row {i}: expected {} fields", header.len())));
            }
            let row = rec
                .iter()
                .take(n_num)
                .map(|s| parse_f64(s).map_err(|e| Error::Parse(format!("row {i}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
            if has_split {
                tags.push(Split::parse(&rec[n_num])?);
            }
        }
        let ds = Self::from_rows(&rows)?;
        if has_split {
            ds.with_split_tags(tags)
        } else {
            Ok(ds)
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Shortest decimal representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    s.trim().parse::<f64>().map_err(|e| format!("`{s}`: {e}"))
}

/// Reads a covariate-only CSV (header row of names, numeric body).
pub fn read_covariates<R: Read>(reader: R) -> Result<Array2<f64>> {
    let mut r = csv::Reader::from_reader(reader);
    let d = r.headers()?.len();
    let mut values = Vec::new();
    let mut n = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != d {
            return Err(Error::Parse(format!("row {i}: expected {d} fields, got {}", rec.len())));
        }
        for s in rec.iter() {
            values.push(parse_f64(s).map_err(|e| Error::Parse(format!("row {i}: {e}")))?);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("covariate file has no rows"));
    }
    let x = Array2::from_shape_vec((n, d), values).expect("shape checked row by row");
    if let Some(((i, j), _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { row: i, column: j });
    }
    Ok(x)
}

/// Result of [`split`]: the three partitions and the original row indices of each.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl SplitData {
    /// The split tag of every row of the parent dataset.
    pub fn tags(&self, n: usize) -> Vec<Split> {
        let mut tags = vec![Split::Train; n];
        for &i in &self.val_idx {
            tags[i] = Split::Val;
        }
        for &i in &self.test_idx {
            tags[i] = Split::Test;
        }
        tags
    }
}

/// Treatment-stratified random split into train/val/test.
///
/// Split sizes are `round(f_train * n)`, `round(f_val * n)` and the remainder;
/// each arm is spread over the splits in proportion to its share of `n`.
/// Rows keep their original relative order inside each split.
pub fn split(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<SplitData> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got ({ft}, {fv}, {fs})"
        )));
    }
    let n = dataset.len();
    let n_train = (ft * n as f64).round() as usize;
    let n_val = ((fv * n as f64).round() as usize).min(n - n_train.min(n));
    if n_train + n_val > n {
        return Err(Error::InfeasibleSplit { n });
    }
    let n1 = dataset.n_treated();
    let share = n1 as f64 / n as f64;
    let tr1 = (n_train as f64 * share).round() as usize;
    let va1 = (n_val as f64 * share).round() as usize;
    // per-arm counts for (train, val, test)
    let counts1 = [tr1, va1];
    let counts0 = [n_train.checked_sub(tr1), n_val.checked_sub(va1)];
    let (Some(tr0), Some(va0)) = (counts0[0], counts0[1]) else {
        return Err(Error::InfeasibleSplit { n });
    };
    let n0 = n - n1;
    if tr1 + va1 > n1 || tr0 + va0 > n0 {
        return Err(Error::InfeasibleSplit { n });
    }
    let te1 = n1 - counts1[0] - counts1[1];
    let te0 = n0 - tr0 - va0;
    if [tr1, va1, te1, tr0, va0, te0].contains(&0) {
        return Err(Error::InfeasibleSplit { n });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tags = vec![Split::Test; n];
    for (arm, (k_train, k_val)) in [(1u8, (tr1, va1)), (0u8, (tr0, va0))] {
        let mut idx: Vec<usize> = (0..n).filter(|&i| dataset.treatment[i] == arm).collect();
        idx.shuffle(&mut rng);
        for &i in &idx[..k_train] {
            tags[i] = Split::Train;
        }
        for &i in &idx[k_train..k_train + k_val] {
            tags[i] = Split::Val;
        }
    }
    let tagged = dataset.clone().with_split_tags(tags)?;
    tagged.partition_by_tags()
}

/// Per-feature z-scoring with statistics from one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl Standardizer {
    /// Fits mean and standard deviation per column. Constant columns get scale 1.
    pub fn fit(x: &Array2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let mut scale = Array1::zeros(x.ncols());
        for j in 0..x.ncols() {
            let var = x.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n;
            scale[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Self { mean, scale }
    }

    pub fn identity(d: usize) -> Self {
        Self { mean: Array1::zeros(d), scale: Array1::ones(d) }
    }

    pub fn transform(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) / &self.scale
    }

    pub fn transform_row(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(self.scale.iter()))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}
