//! Synthetic task families, feature-table ingestion, and whitening.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::SupportSet;
use crate::rng::{self, purpose};

pub const FOURIER_HALF_WIDTH: f64 = 3.0;
pub const FOURIER_GRID: usize = 2001;
pub const MIN_ACCEPTANCE: f64 = 1e-4;
pub const DEFAULT_CURVE_NOISE: f64 = 0.05;

fn default_separation() -> f64 {
    2.0
}
fn default_components() -> usize {
    5
}
fn default_std_min() -> f64 {
    0.1
}
fn default_std_max() -> f64 {
    0.5
}
fn default_modes() -> usize {
    3
}
fn default_amplitude() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    DEFAULT_CURVE_NOISE
}

/// A task family with its parameters. `seed` fixes the task instance (means,
/// coefficients); draws from the instance take their own seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TaskSpec {
    Gmm {
        d: usize,
        #[serde(default = "default_components")]
        k_components: usize,
        #[serde(default = "default_separation")]
        separation_scale: f64,
        #[serde(default = "default_std_min")]
        std_min: f64,
        #[serde(default = "default_std_max")]
        std_max: f64,
        #[serde(default)]
        seed: u64,
    },
    Shell {
        d: usize,
        radius_mean: f64,
        radius_std: f64,
        #[serde(default)]
        seed: u64,
    },
    Moons {
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    Rings {
        k_rings: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    Spirals {
        k_arms: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    FourierDensity {
        d: usize,
        #[serde(default = "default_modes")]
        n_modes: usize,
        /// Multiplies every coefficient; 1 is the reference law.
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        #[serde(default)]
        seed: u64,
    },
    External {
        table_ref: String,
    },
}

impl TaskSpec {
    pub fn gmm(d: usize, seed: u64) -> Self {
        TaskSpec::Gmm {
            d,
            k_components: default_components(),
            separation_scale: default_separation(),
            std_min: default_std_min(),
            std_max: default_std_max(),
            seed,
        }
    }

    /// Named presets accepted on the command line.
    pub fn preset(name: &str, d: Option<usize>, seed: u64) -> Result<Self> {
        let spec = match name {
            "gmm" => TaskSpec::gmm(d.unwrap_or(2), seed),
            "gmm2d" => TaskSpec::gmm(2, seed),
            "shell" => TaskSpec::Shell { d: d.unwrap_or(8), radius_mean: 1.0, radius_std: 0.05, seed },
            "moons" => TaskSpec::Moons { noise: DEFAULT_CURVE_NOISE, seed },
            "rings" => TaskSpec::Rings { k_rings: 3, noise: DEFAULT_CURVE_NOISE, seed },
            "spirals" => TaskSpec::Spirals { k_arms: 2, noise: DEFAULT_CURVE_NOISE, seed },
            "fourier" => TaskSpec::FourierDensity { d: d.unwrap_or(2), n_modes: default_modes(), amplitude: 1.0, seed },
            other => return Err(Error::ConfigError(format!("unknown task preset {other:?}"))),
        };
        if let (Some(want), Some(have)) = (d, spec.dim()) {
            if want != have {
                return Err(Error::ConfigError(format!("task {name} is {have}-dimensional, got --d {want}")));
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            TaskSpec::Gmm { d, .. } | TaskSpec::Shell { d, .. } | TaskSpec::FourierDensity { d, .. } => Some(*d),
            TaskSpec::Moons { .. } | TaskSpec::Rings { .. } | TaskSpec::Spirals { .. } => Some(2),
            TaskSpec::External { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        match self {
            TaskSpec::Gmm { d, k_components, separation_scale, std_min, std_max, .. } => {
                if *d == 0 {
                    return bad("d must be >= 1".into());
                }
                if *k_components == 0 {
                    return bad("k_components must be >= 1".into());
                }
                if !(*separation_scale >= 0.0) {
                    return bad("separation_scale must be >= 0".into());
                }
                if !(*std_min > 0.0 && std_min <= std_max) {
                    return bad("need 0 < std_min <= std_max".into());
                }
            }
            TaskSpec::Shell { d, radius_mean, radius_std, .. } => {
                if *d == 0 {
                    return bad("d must be >= 1".into());
                }
                if !(*radius_mean > 0.0 && *radius_std >= 0.0) {
                    return bad("need radius_mean > 0 and radius_std >= 0".into());
                }
            }
            TaskSpec::Moons { noise, .. } => {
                if !(*noise >= 0.0) {
                    return bad("noise must be >= 0".into());
                }
            }
            TaskSpec::Rings { k_rings: k, noise, .. } | TaskSpec::Spirals { k_arms: k, noise, .. } => {
                if *k == 0 {
                    return bad("need at least one ring/arm".into());
                }
                if !(*noise >= 0.0) {
                    return bad("noise must be >= 0".into());
                }
            }
            TaskSpec::FourierDensity { d, n_modes, amplitude, .. } => {
                if *d == 0 || *n_modes == 0 {
                    return bad("need d >= 1 and n_modes >= 1".into());
                }
                if !(*amplitude >= 0.0 && amplitude.is_finite()) {
                    return bad("amplitude must be finite and >= 0".into());
                }
            }
            TaskSpec::External { .. } => {}
        }
        Ok(())
    }

    /// Resolves the task instance (draws component parameters, loads tables).
    pub fn instantiate(&self) -> Result<Task> {
        self.validate()?;
        let kind = match self {
            TaskSpec::Gmm { d, k_components, separation_scale, std_min, std_max, seed } => {
                let mut r = rng::stream(*seed, purpose::TASK_PARAMS, 0);
                let means: Vec<f64> = (0..k_components * d)
                    .map(|_| r.random_range(-1.0..=1.0) * separation_scale)
                    .collect();
                let (lo, hi) = (std_min.ln(), std_max.ln());
                let stds: Vec<f64> = (0..*k_components)
                    .map(|_| if hi > lo { r.random_range(lo..hi).exp() } else { *std_min })
                    .collect();
                TaskKind::Gmm { d: *d, means, stds }
            }
            TaskSpec::Shell { d, radius_mean, radius_std, .. } => {
                TaskKind::Shell { d: *d, radius_mean: *radius_mean, radius_std: *radius_std }
            }
            TaskSpec::Moons { noise, .. } => TaskKind::Moons { noise: *noise },
            TaskSpec::Rings { k_rings, noise, .. } => TaskKind::Rings { k: *k_rings, noise: *noise },
            TaskSpec::Spirals { k_arms, noise, .. } => TaskKind::Spirals { k: *k_arms, noise: *noise },
            TaskSpec::FourierDensity { d, n_modes, amplitude, seed } => {
                TaskKind::Fourier(FourierDensity::new(*d, *n_modes, *amplitude, *seed)?)
            }
            TaskSpec::External { table_ref } => {
                let table = load_feature_table(Path::new(table_ref), None)?;
                TaskKind::External(table.rows)
            }
        };
        Ok(Task { kind })
    }
}

/// Separable log-density `sum_j sum_k a_jk cos(k pi x_j / L) + b_jk sin(k pi x_j / L)`
/// on `[-L, L]^d`, coefficients `~ amplitude * N(0, 1/k)`.
///
/// The density factorizes over axes, so each coordinate is drawn by its own
/// rejection sampler against a uniform proposal. The envelope is the grid
/// maximum plus a derivative bound over half a grid cell, so it is a true
/// upper bound.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierDensity {
    d: usize,
    n_modes: usize,
    /// `d * n_modes` cosine then sine coefficients, axis-major.
    cos: Vec<f64>,
    sin: Vec<f64>,
    log_bound: Vec<f64>,
    predicted_acceptance: Vec<f64>,
}

impl FourierDensity {
    pub fn new(d: usize, n_modes: usize, amplitude: f64, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, purpose::TASK_PARAMS, 1);
        let mut cos = Vec::with_capacity(d * n_modes);
        let mut sin = Vec::with_capacity(d * n_modes);
        for _ in 0..d {
            for k in 1..=n_modes {
                let sd = amplitude / (k as f64).sqrt();
                cos.push(r.sample::<f64, _>(StandardNormal) * sd);
                sin.push(r.sample::<f64, _>(StandardNormal) * sd);
            }
        }
        let mut fd = FourierDensity { d, n_modes, cos, sin, log_bound: vec![], predicted_acceptance: vec![] };
        let step = 2.0 * FOURIER_HALF_WIDTH / (FOURIER_GRID - 1) as f64;
        for j in 0..d {
            let vals: Vec<f64> = (0..FOURIER_GRID)
                .map(|g| fd.axis_log_density(j, -FOURIER_HALF_WIDTH + g as f64 * step))
                .collect();
            let grid_max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let slope: f64 = (1..=n_modes)
                .map(|k| {
                    let i = j * n_modes + k - 1;
                    (fd.cos[i].abs() + fd.sin[i].abs()) * k as f64 * PI / FOURIER_HALF_WIDTH
                })
                .sum();
            let bound = grid_max + 0.5 * step * slope;
            // trapezoid estimate of the acceptance rate under the bound
            let mut acc = 0.0;
            for (g, v) in vals.iter().enumerate() {
                let w = if g == 0 || g == FOURIER_GRID - 1 { 0.5 } else { 1.0 };
                acc += w * (v - bound).exp();
            }
            fd.log_bound.push(bound);
            fd.predicted_acceptance.push(acc / (FOURIER_GRID - 1) as f64);
        }
        if let Some(&worst) = fd.predicted_acceptance.iter().min_by(|a, b| a.total_cmp(b)) {
            if worst < MIN_ACCEPTANCE {
                return Err(Error::SamplerStall { acceptance: worst });
            }
        }
        Ok(fd)
    }

    pub fn axis_log_density(&self, axis: usize, x: f64) -> f64 {
        let base = axis * self.n_modes;
        (1..=self.n_modes)
            .map(|k| {
                let a = k as f64 * PI * x / FOURIER_HALF_WIDTH;
                self.cos[base + k - 1] * a.cos() + self.sin[base + k - 1] * a.sin()
            })
            .sum()
    }

    /// Unnormalized log-density.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        if x.iter().any(|v| v.abs() > FOURIER_HALF_WIDTH) {
            return f64::NEG_INFINITY;
        }
        x.iter().enumerate().map(|(j, v)| self.axis_log_density(j, *v)).sum()
    }

    /// Per-axis acceptance rates predicted from the grid scan.
    pub fn predicted_acceptance(&self) -> &[f64] {
        &self.predicted_acceptance
    }

    /// Draws one coordinate; returns the value and the number of proposals used.
    fn draw_axis(&self, axis: usize, r: &mut ChaCha8Rng) -> Result<(f64, u64)> {
        let cap = (10.0 / MIN_ACCEPTANCE) as u64;
        for tries in 1..=cap {
            let x = r.random_range(-FOURIER_HALF_WIDTH..=FOURIER_HALF_WIDTH);
            let u: f64 = r.random();
            if u.ln() < self.axis_log_density(axis, x) - self.log_bound[axis] {
                return Ok((x, tries));
            }
        }
        Err(Error::SamplerStall { acceptance: 1.0 / cap as f64 })
    }

    /// Draws `n` rows and reports the empirical per-axis acceptance rates.
    pub fn sample_with_stats(&self, n: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
        let rows: Vec<(Vec<f64>, Vec<u64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut r = rng::stream(seed, purpose::SUPPORT ^ 0xf0, i as u64);
                let mut row = Vec::with_capacity(self.d);
                let mut tries = Vec::with_capacity(self.d);
                for j in 0..self.d {
                    let (x, t) = self.draw_axis(j, &mut r)?;
                    row.push(x);
                    tries.push(t);
                }
                Ok((row, tries))
            })
            .collect::<Result<_>>()?;
        let mut totals = vec![0u64; self.d];
        let mut data = Vec::with_capacity(n * self.d);
        for (row, tries) in rows {
            data.extend(row);
            for (t, v) in totals.iter_mut().zip(tries) {
                *t += v;
            }
        }
        let rates = totals.iter().map(|t| n as f64 / *t as f64).collect();
        Ok((data, rates))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TaskKind {
    Gmm { d: usize, means: Vec<f64>, stds: Vec<f64> },
    Shell { d: usize, radius_mean: f64, radius_std: f64 },
    Moons { noise: f64 },
    Rings { k: usize, noise: f64 },
    Spirals { k: usize, noise: f64 },
    Fourier(FourierDensity),
    External(SupportSet),
}

/// A resolved task instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    kind: TaskKind,
}

fn gauss(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

impl Task {
    pub fn dim(&self) -> usize {
        match &self.kind {
            TaskKind::Gmm { d, .. } | TaskKind::Shell { d, .. } => *d,
            TaskKind::Moons { .. } | TaskKind::Rings { .. } | TaskKind::Spirals { .. } => 2,
            TaskKind::Fourier(f) => f.d,
            TaskKind::External(t) => t.d(),
        }
    }

    pub fn fourier(&self) -> Option<&FourierDensity> {
        match &self.kind {
            TaskKind::Fourier(f) => Some(f),
            _ => None,
        }
    }

    /// `n` i.i.d. draws; row `i` uses stream `(seed, i)`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<SupportSet> {
        if n == 0 {
            return Err(Error::InvalidParameter("n must be >= 1".into()));
        }
        let d = self.dim();
        let data = match &self.kind {
            TaskKind::Fourier(f) => f.sample_with_stats(n, seed)?.0,
            TaskKind::External(table) => {
                let mut r = rng::stream(seed, purpose::SUBSAMPLE, 0);
                let idx = rand::seq::index::sample(&mut r, table.m(), n.min(table.m()));
                if n > table.m() {
                    return Err(Error::InvalidParameter(format!(
                        "requested {n} rows from a table of {}",
                        table.m()
                    )));
                }
                idx.iter().flat_map(|i| table.row(i).to_vec()).collect()
            }
            _ => {
                let mut data = vec![0.0; n * d];
                data.par_chunks_exact_mut(d).enumerate().for_each(|(i, row)| {
                    let mut r = rng::stream(seed, purpose::SUPPORT ^ 0xf1, i as u64);
                    self.draw_row(&mut r, row);
                });
                data
            }
        };
        SupportSet::new(data, n, d)
    }

    fn draw_row(&self, r: &mut ChaCha8Rng, row: &mut [f64]) {
        match &self.kind {
            TaskKind::Gmm { d, means, stds } => {
                let c = r.random_range(0..stds.len());
                for (j, o) in row.iter_mut().enumerate() {
                    *o = means[c * d + j] + stds[c] * gauss(r);
                }
            }
            TaskKind::Shell { radius_mean, radius_std, .. } => {
                let lo = (radius_mean - 6.0 * radius_std).max(0.0);
                let hi = radius_mean + 6.0 * radius_std;
                let radius = loop {
                    let v = radius_mean + radius_std * gauss(r);
                    if v > 0.0 && v >= lo && v <= hi {
                        break v;
                    }
                };
                let norm = loop {
                    for o in row.iter_mut() {
                        *o = gauss(r);
                    }
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > 1e-12 {
                        break n;
                    }
                };
                row.iter_mut().for_each(|o| *o *= radius / norm);
            }
            TaskKind::Moons { noise } => {
                let theta = r.random_range(0.0..=PI);
                if r.random::<bool>() {
                    row[0] = theta.cos();
                    row[1] = theta.sin();
                } else {
                    row[0] = 1.0 - theta.cos();
                    row[1] = 0.5 - theta.sin();
                }
                row[0] += noise * gauss(r);
                row[1] += noise * gauss(r);
            }
            TaskKind::Rings { k, noise } => {
                let ring = r.random_range(0..*k);
                let radius = (ring + 1) as f64 / *k as f64;
                let theta = r.random_range(0.0..2.0 * PI);
                row[0] = radius * theta.cos() + noise * gauss(r);
                row[1] = radius * theta.sin() + noise * gauss(r);
            }
            TaskKind::Spirals { k, noise } => {
                let arm = r.random_range(0..*k);
                let u: f64 = r.random();
                let radius = 0.1 + 0.9 * u;
                let theta = 3.0 * PI * u + 2.0 * PI * arm as f64 / *k as f64;
                row[0] = radius * theta.cos() + noise * gauss(r);
                row[1] = radius * theta.sin() + noise * gauss(r);
            }
            TaskKind::Fourier(_) | TaskKind::External(_) => unreachable!("handled in sample"),
        }
    }
}

pub fn sample_task(spec: &TaskSpec, n: usize, seed: u64) -> Result<SupportSet> {
    spec.instantiate()?.sample(n, seed)
}

/// Support and evaluation draws from disjoint streams of one task instance.
pub fn make_support_and_eval(spec: &TaskSpec, m: usize, n_eval: usize, seed: u64) -> Result<(SupportSet, SupportSet)> {
    if m == 0 {
        return Err(Error::InvalidParameter("support size m must be >= 1".into()));
    }
    let task = spec.instantiate()?;
    support_and_eval_from(&task, m, n_eval, seed)
}

/// Support rows alone; for synthetic families identical to the support half of
/// `support_and_eval_from`.
pub fn draw_support(task: &Task, m: usize, seed: u64) -> Result<SupportSet> {
    if m == 0 {
        return Err(Error::InvalidParameter("support size m must be >= 1".into()));
    }
    if let TaskKind::External(table) = &task.kind {
        if m > table.m() {
            return Err(Error::InvalidParameter(format!("need {m} support rows, table has {}", table.m())));
        }
        let mut r = rng::stream(seed, purpose::SUBSAMPLE, 1);
        let idx = rand::seq::index::sample(&mut r, table.m(), m);
        let data: Vec<f64> = idx.iter().flat_map(|i| table.row(i).to_vec()).collect();
        return SupportSet::new(data, m, table.d());
    }
    task.sample(m, rng::child_seed(seed, purpose::SUPPORT, 0))
}

pub fn support_and_eval_from(task: &Task, m: usize, n_eval: usize, seed: u64) -> Result<(SupportSet, SupportSet)> {
    if let TaskKind::External(table) = &task.kind {
        // disjoint rows of one permutation
        if m + n_eval > table.m() {
            return Err(Error::InvalidParameter(format!(
                "need {} rows for support + eval, table has {}",
                m + n_eval,
                table.m()
            )));
        }
        let mut r = rng::stream(seed, purpose::SUBSAMPLE, 1);
        let idx = rand::seq::index::sample(&mut r, table.m(), m + n_eval).into_vec();
        let pick = |ids: &[usize]| -> Result<SupportSet> {
            let data: Vec<f64> = ids.iter().flat_map(|&i| table.row(i).to_vec()).collect();
            SupportSet::new(data, ids.len(), table.d())
        };
        return Ok((pick(&idx[..m])?, pick(&idx[m..])?));
    }
    let support = draw_support(task, m, seed)?;
    let eval = task.sample(n_eval, rng::child_seed(seed, purpose::EVAL, 0))?;
    Ok((support, eval))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureTable {
    pub rows: SupportSet,
    pub columns: Vec<String>,
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    Csv,
    Bin,
}

impl TableFormat {
    pub fn detect(bytes: &[u8]) -> TableFormat {
        if bytes.starts_with(BIN_MAGIC) {
            TableFormat::Bin
        } else {
            TableFormat::Csv
        }
    }
}

pub const BIN_MAGIC: &[u8; 4] = b"NWF1";

fn default_columns(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("x{j}")).collect()
}

/// Parses UTF-8 comma-separated text; a first row that is not entirely numeric is a header.
pub fn parse_csv_table(text: &[u8], source: &str) -> Result<FeatureTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text);
    let mut columns: Option<Vec<String>> = None;
    let mut width: Option<usize> = None;
    let mut data = Vec::new();
    let mut n = 0usize;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::FormatError(format!("line {}: {e}", line + 1)))?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        let parsed: Vec<std::result::Result<f64, _>> = rec.iter().map(|f| f.parse::<f64>()).collect();
        if line == 0 && parsed.iter().any(|p| p.is_err()) {
            columns = Some(rec.iter().map(str::to_string).collect());
            width = Some(rec.len());
            continue;
        }
        match width {
            Some(w) if w != rec.len() => {
                return Err(Error::FormatError(format!(
                    "line {}: expected {w} fields, found {}",
                    line + 1,
                    rec.len()
                )))
            }
            None => width = Some(rec.len()),
            _ => {}
        }
        for (j, p) in parsed.into_iter().enumerate() {
            let v = p.map_err(|_| Error::FormatError(format!("line {}: field {} is not a number", line + 1, j + 1)))?;
            if !v.is_finite() {
                return Err(Error::DataError(format!("line {}: non-finite value in field {}", line + 1, j + 1)));
            }
            data.push(v);
        }
        n += 1;
    }
    let d = width.unwrap_or(0);
    if n == 0 || d == 0 {
        return Err(Error::EmptyTable { columns: columns.unwrap_or_default() });
    }
    Ok(FeatureTable {
        rows: SupportSet::new(data, n, d)?,
        columns: columns.unwrap_or_else(|| default_columns(d)),
        source: source.to_string(),
    })
}

/// Parses `"NWF1" | u32 n | u32 d | n*d f64`, all little-endian, row-major.
pub fn parse_binary_table(bytes: &[u8], source: &str) -> Result<FeatureTable> {
    if bytes.len() < 12 || &bytes[..4] != BIN_MAGIC {
        return Err(Error::FormatError("missing NWF1 header".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if d == 0 {
        return Err(Error::FormatError("zero columns".into()));
    }
    if n == 0 {
        return Err(Error::EmptyTable { columns: default_columns(d) });
    }
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| c.checked_add(12))
        .ok_or_else(|| Error::FormatError("table size overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::FormatError(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let data: Vec<f64> = bytes[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::DataError(format!("non-finite value at row {}, column {}", pos / d, pos % d)));
    }
    Ok(FeatureTable { rows: SupportSet::new(data, n, d)?, columns: default_columns(d), source: source.to_string() })
}

pub fn encode_binary_table(rows: &SupportSet) -> Result<Vec<u8>> {
    let n = u32::try_from(rows.m()).map_err(|_| Error::FormatError("too many rows for NWF1".into()))?;
    let d = u32::try_from(rows.d()).map_err(|_| Error::FormatError("too many columns for NWF1".into()))?;
    let mut out = Vec::with_capacity(12 + rows.as_slice().len() * 8);
    out.extend_from_slice(BIN_MAGIC);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    for v in rows.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn parse_feature_table(bytes: &[u8], format: Option<TableFormat>, source: &str) -> Result<FeatureTable> {
    match format.unwrap_or_else(|| TableFormat::detect(bytes)) {
        TableFormat::Csv => parse_csv_table(bytes, source),
        TableFormat::Bin => parse_binary_table(bytes, source),
    }
}

/// Loads a table; the format is sniffed from the magic bytes when not given.
pub fn load_feature_table(path: &Path, format: Option<TableFormat>) -> Result<FeatureTable> {
    let bytes = std::fs::read(path)?;
    parse_feature_table(&bytes, format, &path.display().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WhitenConfig {
    pub strength: f64,
    pub regularization: f64,
}

impl WhitenConfig {
    pub fn new(strength: f64, regularization: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(Error::InvalidParameter(format!("whitening strength {strength} outside [0, 1]")));
        }
        if !(regularization >= 0.0 && regularization.is_finite()) {
            return Err(Error::InvalidParameter("regularization must be >= 0".into()));
        }
        Ok(WhitenConfig { strength, regularization })
    }
}

/// The affine map `x -> T (x - mean) + mean` with `T = C^{-strength/2}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhitenRecord {
    pub strength: f64,
    pub regularization: f64,
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub transform: Vec<f64>,
    /// Eigenvalues of the regularized covariance, ascending.
    pub eigenvalues: Vec<f64>,
}

impl WhitenRecord {
    pub fn apply(&self, rows: &SupportSet) -> Result<SupportSet> {
        let d = self.mean.len();
        if rows.d() != d {
            return Err(Error::DimError { expected: d, got: rows.d() });
        }
        if self.strength == 0.0 {
            return Ok(rows.clone());
        }
        rows.map_rows(d, |r, o| {
            for (i, oi) in o.iter_mut().enumerate() {
                let acc: f64 = (0..d).map(|j| self.transform[i * d + j] * (r[j] - self.mean[j])).sum();
                *oi = acc + self.mean[i];
            }
        })
    }
}

pub fn sample_covariance(rows: &SupportSet) -> (Vec<f64>, DMatrix<f64>) {
    let d = rows.d();
    let mean = rows.mean();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in rows.rows() {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in 0..=i {
                cov[(i, j)] += di * (r[j] - mean[j]);
            }
        }
    }
    let denom = (rows.m().max(2) - 1) as f64;
    for i in 0..d {
        for j in 0..=i {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

/// Interpolated whitening by the matrix power `C^{-strength/2}` of the
/// ridge-regularized sample covariance.
pub fn whiten(table: &FeatureTable, cfg: WhitenConfig) -> Result<(FeatureTable, WhitenRecord)> {
    let cfg = WhitenConfig::new(cfg.strength, cfg.regularization)?;
    let d = table.rows.d();
    let (mean, mut cov) = sample_covariance(&table.rows);
    for i in 0..d {
        cov[(i, i)] += cfg.regularization;
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let top = eigenvalues.last().copied().unwrap_or(0.0);
    let singular = table.rows.m() < d + 1 && cfg.regularization == 0.0;
    if (singular || eigenvalues[0] <= 1e-12 * top.max(f64::MIN_POSITIVE)) && cfg.strength > 0.0 {
        return Err(Error::SingularCovariance);
    }
    let transform = if cfg.strength == 0.0 {
        DMatrix::<f64>::identity(d, d)
    } else {
        let p = -cfg.strength / 2.0;
        let scaled = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| e.powf(p)));
        &eig.eigenvectors * scaled * eig.eigenvectors.transpose()
    };
    let record = WhitenRecord {
        strength: cfg.strength,
        regularization: cfg.regularization,
        mean,
        transform: (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| transform[(i, j)]).collect(),
        eigenvalues,
    };
    let rows = record.apply(&table.rows)?;
    Ok((FeatureTable { rows, columns: table.columns.clone(), source: table.source.clone() }, record))
}
