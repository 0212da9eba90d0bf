use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::seed_range;
use crate::error::{Error, Result};
use crate::kernels::SupportSet;
use crate::metrics::{self, median};
use crate::ode::{generate, BaseLaw, IntegratorConfig};
use crate::report::RunReport;
use crate::rng::{self, purpose};
use crate::row;
use crate::schedule::{FlowTime, PathSchedule};
use crate::tasks::{self, load_feature_table, FeatureTable, TaskSpec, WhitenConfig};
use crate::velocity::PluginField;

/// Mixture shape shared by all dimensions of the collapse sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmShape {
    pub k_components: usize,
    pub separation_scale: f64,
    pub std_min: f64,
    pub std_max: f64,
}

impl Default for GmmShape {
    fn default() -> Self {
        GmmShape { k_components: 5, separation_scale: 4.0, std_min: 0.5, std_max: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeffCollapseConfig {
    pub dims: Vec<usize>,
    pub m: usize,
    pub t_star: f64,
    pub seeds: Vec<u64>,
    pub n_queries: usize,
    pub sigma_min: f64,
    pub gmm: GmmShape,
    /// Allowed range of the median n_eff at the first listed dimension.
    pub first_band: (f64, f64),
    /// Allowed range of the median n_eff at the last listed dimension.
    pub last_band: (f64, f64),
}

impl Default for NeffCollapseConfig {
    fn default() -> Self {
        NeffCollapseConfig {
            dims: vec![2, 4, 8, 16],
            m: 64,
            t_star: 0.56,
            seeds: seed_range(8),
            n_queries: 512,
            sigma_min: 0.01,
            gmm: GmmShape::default(),
            first_band: (4.5, 13.5),
            last_band: (1.0, 1.5),
        }
    }
}

fn median_neff(s: &SupportSet, sched: &PathSchedule, t: FlowTime, n_queries: usize, seed: u64) -> Result<f64> {
    Ok(metrics::neff_profile(s, sched, &[t], n_queries, seed)?[0].median)
}

/// Median effective sample size at mid-flow across dimensions.
pub fn exp_neff_collapse(cfg: &NeffCollapseConfig) -> Result<RunReport> {
    if cfg.dims.len() < 2 {
        return Err(Error::ConfigError("neff-collapse needs at least two dimensions".into()));
    }
    if cfg.seeds.is_empty() {
        return Err(Error::ConfigError("seed list is empty".into()));
    }
    let sched = PathSchedule::new(cfg.sigma_min)?;
    let t = FlowTime::new(cfg.t_star)?;
    let jobs: Vec<(usize, u64)> = cfg.dims.iter().flat_map(|&d| cfg.seeds.iter().map(move |&s| (d, s))).collect();
    let results: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|&(d, seed)| {
            let spec = TaskSpec::Gmm {
                d,
                k_components: cfg.gmm.k_components,
                separation_scale: cfg.gmm.separation_scale,
                std_min: cfg.gmm.std_min,
                std_max: cfg.gmm.std_max,
                seed,
            };
            let task = spec.instantiate()?;
            let s = super::support_only(&task, cfg.m, seed)?;
            let neff = median_neff(&s, &sched, t, cfg.n_queries, seed)?;
            let single = median_neff(&s.head(1)?, &sched, t, cfg.n_queries.min(64), seed)?;
            Ok((neff, single))
        })
        .collect::<Result<_>>()?;
    let mut rep = RunReport::new("neff-collapse", cfg)?;
    let mut medians = Vec::new();
    let mut control_ok = true;
    for (di, &d) in cfg.dims.iter().enumerate() {
        let chunk = &results[di * cfg.seeds.len()..(di + 1) * cfg.seeds.len()];
        for (&seed, (neff, single)) in cfg.seeds.iter().zip(chunk) {
            rep.push_row(row!("d" => d, "seed" => seed, "median_neff" => neff, "single_point_neff" => single));
            control_ok &= *single == 1.0;
        }
        let vals: Vec<f64> = chunk.iter().map(|c| c.0).collect();
        let sum = metrics::summarize(&vals);
        rep.aggregate(&format!("d{d}_median"), sum.median);
        rep.aggregate(&format!("d{d}_iqr"), sum.iqr);
        medians.push(sum.median);
    }
    let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
    let first = medians[0];
    let last = *medians.last().expect("two or more dims");
    rep.check("strictly_decreasing", if decreasing { 1.0 } else { 0.0 }, "medians strictly decrease in d".into(), decreasing);
    rep.check(
        "first_dim_median",
        first,
        format!("in [{}, {}]", cfg.first_band.0, cfg.first_band.1),
        (cfg.first_band.0..=cfg.first_band.1).contains(&first),
    );
    rep.check(
        "last_dim_median",
        last,
        format!("in [{}, {}]", cfg.last_band.0, cfg.last_band.1),
        (cfg.last_band.0..=cfg.last_band.1).contains(&last),
    );
    rep.check("single_point_control", if control_ok { 1.0 } else { 0.0 }, "n_eff == 1 for m = 1".into(), control_ok);
    rep.notes.push("queries drawn from the support's own path marginal p_t^S".into());
    rep.conclude();
    Ok(rep)
}

/// Rotated Gaussian features with geometrically decaying axis scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticFeatures {
    pub n: usize,
    pub d: usize,
    pub top_std: f64,
    pub decay: f64,
    pub seed: u64,
}

impl Default for SyntheticFeatures {
    fn default() -> Self {
        SyntheticFeatures { n: 4000, d: 8, top_std: 2.0, decay: 0.5, seed: 0 }
    }
}

impl SyntheticFeatures {
    pub fn build(&self) -> Result<FeatureTable> {
        if self.n < 2 || self.d == 0 {
            return Err(Error::ConfigError("synthetic features need n >= 2 and d >= 1".into()));
        }
        let mut r = rng::stream(self.seed, purpose::TASK_PARAMS, 3);
        let g = DMatrix::<f64>::from_fn(self.d, self.d, |_, _| r.sample(StandardNormal));
        let q = g.qr().q();
        let stds: Vec<f64> = (0..self.d).map(|j| self.top_std * self.decay.powi(j as i32)).collect();
        let mut data = Vec::with_capacity(self.n * self.d);
        for i in 0..self.n {
            let mut rr = rng::stream(self.seed, purpose::SUPPORT, i as u64);
            let z: Vec<f64> = stds.iter().map(|s| s * rr.sample::<f64, _>(StandardNormal)).collect();
            for a in 0..self.d {
                data.push((0..self.d).map(|b| q[(a, b)] * z[b]).sum());
            }
        }
        Ok(FeatureTable {
            rows: SupportSet::new(data, self.n, self.d)?,
            columns: crate::format::default_columns("f", self.d),
            source: "synthetic".into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WhiteningControlConfig {
    /// Feature table path; synthetic features are used when absent.
    pub table: Option<String>,
    pub synthetic: SyntheticFeatures,
    pub strengths: Vec<f64>,
    pub regularization: f64,
    pub m: usize,
    pub n: usize,
    pub seeds: Vec<u64>,
    pub t_star: f64,
    pub n_queries: usize,
    pub sigma_min: f64,
    pub integrator: IntegratorConfig,
    /// Required ratio n_eff(strength 0) / n_eff(strength 1).
    pub neff_drop_factor: f64,
}

impl Default for WhiteningControlConfig {
    fn default() -> Self {
        WhiteningControlConfig {
            table: None,
            synthetic: SyntheticFeatures::default(),
            strengths: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            regularization: 0.0,
            m: 256,
            n: 500,
            seeds: seed_range(4),
            t_star: 0.56,
            n_queries: 512,
            sigma_min: 0.01,
            integrator: IntegratorConfig::default(),
            neff_drop_factor: 3.0,
        }
    }
}

fn split_rows(rows: &SupportSet, m: usize, n: usize, seed: u64) -> Result<(SupportSet, SupportSet)> {
    if m + n > rows.m() {
        return Err(Error::ConfigError(format!("need {} rows for support + held-out, table has {}", m + n, rows.m())));
    }
    let mut r = rng::stream(seed, purpose::SUBSAMPLE, 1);
    let idx = rand::seq::index::sample(&mut r, rows.m(), m + n).into_vec();
    let pick = |ids: &[usize]| SupportSet::new(ids.iter().flat_map(|&i| rows.row(i).to_vec()).collect(), ids.len(), rows.d());
    Ok((pick(&idx[..m])?, pick(&idx[m..])?))
}

fn pilot_bandwidth(rows: &SupportSet) -> Result<f64> {
    let k = rows.m().min(1000);
    let half = k / 2;
    let a = SupportSet::new(rows.as_slice()[..half * rows.d()].to_vec(), half, rows.d())?;
    let b = SupportSet::new(rows.as_slice()[half * rows.d()..k * rows.d()].to_vec(), k - half, rows.d())?;
    match metrics::median_heuristic(&a, &b) {
        Ok(h) => Ok(h),
        Err(Error::DegenerateScale) => Ok(1.0),
        Err(e) => Err(e),
    }
}

/// n_eff and plug-in MMD² across whitening strengths.
pub fn exp_whitening_control(cfg: &WhiteningControlConfig) -> Result<RunReport> {
    if cfg.seeds.is_empty() || cfg.strengths.is_empty() {
        return Err(Error::ConfigError("need at least one seed and one strength".into()));
    }
    let base = match &cfg.table {
        Some(path) => load_feature_table(std::path::Path::new(path), None)?,
        None => cfg.synthetic.build()?,
    };
    let sched = PathSchedule::new(cfg.sigma_min)?;
    let t = FlowTime::new(cfg.t_star)?;
    let mut rep = RunReport::new("whitening-control", cfg)?;
    let mut neff_by_strength = Vec::new();
    let mut mmd_by_strength = Vec::new();
    let mut identity_exact = true;
    for &lam in &cfg.strengths {
        let (table, _) = tasks::whiten(&base, WhitenConfig::new(lam, cfg.regularization)?)?;
        if lam == 0.0 {
            identity_exact &= table.rows == base.rows;
        }
        let bandwidth = pilot_bandwidth(&table.rows)?;
        let per_seed: Vec<(f64, f64)> = cfg
            .seeds
            .par_iter()
            .map(|&seed| {
                let (s, held) = split_rows(&table.rows, cfg.m, cfg.n, seed)?;
                let neff = median_neff(&s, &sched, t, cfg.n_queries, seed)?;
                let field = PluginField::new(s, sched);
                let gen = generate(&field, cfg.n, rng::child_seed(seed, purpose::BASE_NOISE, 0), &cfg.integrator, &BaseLaw::Isotropic)?;
                let mmd = metrics::mmd2_unbiased(&gen.samples, &held, bandwidth)?.value;
                Ok((neff, mmd))
            })
            .collect::<Result<_>>()?;
        for (&seed, (neff, mmd)) in cfg.seeds.iter().zip(&per_seed) {
            rep.push_row(row!("strength" => lam, "seed" => seed, "median_neff" => neff, "mmd2" => mmd, "mmd_bandwidth" => bandwidth));
        }
        let neff = median(&per_seed.iter().map(|p| p.0).collect::<Vec<_>>());
        let mmd = median(&per_seed.iter().map(|p| p.1).collect::<Vec<_>>());
        rep.aggregate(&format!("strength_{lam}_median_neff"), neff);
        rep.aggregate(&format!("strength_{lam}_median_mmd2"), mmd);
        neff_by_strength.push((lam, neff));
        mmd_by_strength.push(mmd);
    }
    let max = mmd_by_strength.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = mmd_by_strength.iter().copied().fold(f64::INFINITY, f64::min);
    rep.aggregate("mmd2_max_over_min", max / min);
    let at = |l: f64| neff_by_strength.iter().find(|(s, _)| *s == l).map(|p| p.1);
    if let (Some(n0), Some(n1)) = (at(0.0), at(1.0)) {
        let ratio = n0 / n1;
        rep.aggregate("neff_drop_ratio", ratio);
        rep.check("neff_drop_ratio", ratio, format!(">= {}", cfg.neff_drop_factor), ratio >= cfg.neff_drop_factor);
    }
    rep.check("strength_zero_is_identity", if identity_exact { 1.0 } else { 0.0 }, "rows unchanged at strength 0".into(), identity_exact);
    rep.notes.push("MMD² curve is reported without a threshold".into());
    rep.conclude();
    Ok(rep)
}
