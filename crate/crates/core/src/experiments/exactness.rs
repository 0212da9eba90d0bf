use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kernels::{self, SupportSet};
use crate::report::RunReport;
use crate::rng::{self, purpose};
use crate::row;
use crate::schedule::{FlowTime, PathSchedule};
use crate::velocity::{attention_realized_velocity, PluginField, VelocityField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RealizationFuzzConfig {
    pub n_configs: usize,
    pub seed: u64,
    pub dims: Vec<usize>,
    pub m_max: usize,
    pub t_min: f64,
    pub sigma_min: f64,
    pub tolerance: f64,
}

impl Default for RealizationFuzzConfig {
    fn default() -> Self {
        RealizationFuzzConfig {
            n_configs: 1000,
            seed: 1,
            dims: vec![1, 2, 4, 8, 16],
            m_max: 64,
            t_min: 1e-3,
            sigma_min: 0.01,
            tolerance: 1e-10,
        }
    }
}

fn gauss(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

struct FuzzCase {
    d: usize,
    m: usize,
    t: f64,
    support: SupportSet,
    x: Vec<f64>,
}

/// Random `(d, m, t, S, x)`. Case 0 pins `m = 1`; case 1 pins the smallest
/// `t` with the largest `d`. Queries come from `p_t^S` or, one time in five,
/// from a broad Gaussian.
fn fuzz_case(
    r: &mut ChaCha8Rng,
    index: usize,
    dims: &[usize],
    m_max: usize,
    t_min: f64,
    sched: &PathSchedule,
) -> Result<FuzzCase> {
    let mut d = dims[r.random_range(0..dims.len())];
    let mut m = r.random_range(1..=m_max);
    let mut t = (r.random_range(t_min.ln()..=0.0f64)).exp().clamp(t_min, 1.0);
    if index == 0 {
        m = 1;
    }
    if index == 1 {
        t = t_min;
        d = *dims.iter().max().unwrap_or(&d);
    }
    let scale = r.random_range(0.1f64.ln()..3.0f64.ln()).exp();
    let data: Vec<f64> = (0..m * d).map(|_| scale * gauss(r)).collect();
    let support = SupportSet::new(data, m, d)?;
    let sigma = sched.sigma_at(FlowTime::new(t)?);
    let x = if r.random_range(0..5) == 0 {
        (0..d).map(|_| 2.0 * scale * gauss(r)).collect()
    } else {
        let j = r.random_range(0..m);
        support.row(j).iter().map(|s| t * s + sigma * gauss(r)).collect()
    };
    Ok(FuzzCase { d, m, t, support, x })
}

/// Attention-realized velocity against the plug-in field on random configs.
pub fn exp_realization_fuzz(cfg: &RealizationFuzzConfig) -> Result<RunReport> {
    let sched = PathSchedule::new(cfg.sigma_min)?;
    let results: Vec<(usize, usize, f64, f64)> = (0..cfg.n_configs)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(cfg.seed, purpose::FUZZ, i as u64);
            let c = fuzz_case(&mut r, i, &cfg.dims, cfg.m_max, cfg.t_min, &sched)?;
            let t = FlowTime::new(c.t)?;
            let plug = PluginField::new(c.support.clone(), sched).eval(&c.x, t)?;
            let attn = attention_realized_velocity(&c.support, &sched, &c.x, t)?;
            let dev = plug.iter().zip(&attn).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            Ok((c.d, c.m, c.t, dev))
        })
        .collect::<Result<_>>()?;
    let mut rep = RunReport::new("realization-fuzz", cfg)?;
    let mut max_dev: f64 = 0.0;
    for (i, (d, m, t, dev)) in results.iter().enumerate() {
        rep.push_row(row!("config" => i, "d" => d, "m" => m, "t" => t, "max_abs_deviation" => dev));
        max_dev = max_dev.max(*dev);
    }
    rep.aggregate("n_configs", cfg.n_configs);
    rep.aggregate("max_abs_deviation", max_dev);
    rep.check("max_abs_deviation", max_dev, format!("<= {:e}", cfg.tolerance), max_dev <= cfg.tolerance);
    rep.conclude();
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdeIdentityConfig {
    pub n_configs: usize,
    pub points_per_config: usize,
    pub seed: u64,
    pub dims: Vec<usize>,
    pub m_max: usize,
    pub t_min: f64,
    pub sigma_min: f64,
    pub tolerance: f64,
    pub density_floor: f64,
}

impl Default for KdeIdentityConfig {
    fn default() -> Self {
        KdeIdentityConfig {
            n_configs: 200,
            points_per_config: 50,
            seed: 2,
            dims: vec![1, 2, 4, 8, 16],
            m_max: 64,
            t_min: 1e-3,
            sigma_min: 0.01,
            tolerance: 1e-12,
            density_floor: 1e-280,
        }
    }
}

/// Mixture form `t^d p_t(t x~)` against the de-scaled KDE at `h(t)`, in log space.
pub fn exp_kde_identity(cfg: &KdeIdentityConfig) -> Result<RunReport> {
    let sched = PathSchedule::new(cfg.sigma_min)?;
    let log_floor = cfg.density_floor.ln();
    let results: Vec<(usize, usize, f64, usize, f64)> = (0..cfg.n_configs)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(cfg.seed, purpose::FUZZ ^ 0x4b, i as u64);
            let c = fuzz_case(&mut r, i, &cfg.dims, cfg.m_max, cfg.t_min, &sched)?;
            let t = FlowTime::new(c.t)?;
            let h = sched.bandwidth_at(t)?;
            let sigma = sched.sigma_at(t);
            let mut compared = 0;
            let mut worst: f64 = 0.0;
            for _ in 0..cfg.points_per_config {
                let j = r.random_range(0..c.m);
                let spread = r.random_range(0.25..4.0);
                let x_tilde: Vec<f64> = c.support.row(j).iter().map(|s| s + spread * h * gauss(&mut r)).collect();
                let kde = kernels::kde_descaled_log_density(&x_tilde, &c.support, h)?;
                if kde < log_floor {
                    continue;
                }
                let x: Vec<f64> = x_tilde.iter().map(|v| c.t * v).collect();
                let mix = kernels::mixture_log_density(&x, &c.support, c.t, sigma)? + c.d as f64 * c.t.ln();
                worst = worst.max((mix - kde).abs());
                compared += 1;
            }
            Ok((c.d, c.m, c.t, compared, worst))
        })
        .collect::<Result<_>>()?;
    let mut rep = RunReport::new("kde-identity", cfg)?;
    let mut max_diff: f64 = 0.0;
    let mut total = 0;
    for (i, (d, m, t, n, diff)) in results.iter().enumerate() {
        rep.push_row(row!("config" => i, "d" => d, "m" => m, "t" => t, "points_compared" => n, "max_abs_log_diff" => diff));
        max_diff = max_diff.max(*diff);
        total += n;
    }
    rep.aggregate("points_compared", total);
    rep.aggregate("max_abs_log_diff", max_diff);
    rep.check("max_abs_log_diff", max_diff, format!("<= {:e}", cfg.tolerance), max_diff <= cfg.tolerance);
    rep.check("points_compared", total as f64, "> 0".into(), total > 0);
    rep.conclude();
    Ok(rep)
}
