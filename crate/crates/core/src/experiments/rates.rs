use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::seed_range;
use crate::error::{Error, Result};
use crate::kernels::{self, KernelSpec, SupportSet};
use crate::metrics::fit_power_law;
use crate::report::RunReport;
use crate::rng::{self, purpose};
use crate::row;
use crate::tasks::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceFamily {
    Fourier,
    Gmm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceScalingConfig {
    pub family: VarianceFamily,
    pub d: usize,
    pub m_grid: Vec<usize>,
    pub m_ref: usize,
    pub seeds: Vec<u64>,
    pub n_queries: usize,
    /// Fourier coefficient multiplier.
    pub amplitude: f64,
    pub n_modes: usize,
    /// GMM component count; the other GMM parameters keep their defaults.
    pub k_components: usize,
    /// Thresholds; `null` selects the family default.
    pub alpha_min: Option<f64>,
    pub alpha_max: Option<f64>,
    pub r2_min: Option<f64>,
}

impl Default for VarianceScalingConfig {
    fn default() -> Self {
        VarianceScalingConfig {
            family: VarianceFamily::Fourier,
            d: 8,
            m_grid: vec![10, 25, 50, 100, 250, 500, 1000],
            m_ref: 50_000,
            seeds: seed_range(4),
            n_queries: 256,
            amplitude: 0.25,
            n_modes: 3,
            k_components: 5,
            alpha_min: None,
            alpha_max: None,
            r2_min: None,
        }
    }
}

impl VarianceScalingConfig {
    /// Fills unset thresholds with the family defaults.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let (lo, hi, r2) = match self.family {
            VarianceFamily::Fourier => (0.25, Some(0.40), Some(0.95)),
            VarianceFamily::Gmm => (0.9, None, None),
        };
        c.alpha_min = c.alpha_min.or(Some(lo));
        c.alpha_max = c.alpha_max.or(hi);
        c.r2_min = c.r2_min.or(r2);
        c
    }

    fn task(&self, seed: u64) -> TaskSpec {
        match self.family {
            VarianceFamily::Fourier => {
                TaskSpec::FourierDensity { d: self.d, n_modes: self.n_modes, amplitude: self.amplitude, seed }
            }
            VarianceFamily::Gmm => match TaskSpec::gmm(self.d, seed) {
                TaskSpec::Gmm { separation_scale, std_min, std_max, .. } => TaskSpec::Gmm {
                    d: self.d,
                    k_components: self.k_components,
                    separation_scale,
                    std_min,
                    std_max,
                    seed,
                },
                other => other,
            },
        }
    }
}

/// `mean_q |m_h^S(q) - m_h^{S_ref}(q)|^2` at the bandwidth `h = m^{-1/(4+d)}`.
fn nw_discrepancy(queries: &SupportSet, s: &SupportSet, s_ref: &SupportSet, h: f64) -> Result<f64> {
    let k = KernelSpec::isotropic(h)?;
    let per_query: Vec<f64> = (0..queries.m())
        .into_par_iter()
        .map(|i| {
            let q = queries.row(i);
            let a = kernels::local_mean(q, s, &k, None)?;
            let b = kernels::local_mean(q, s_ref, &k, None)?;
            Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum())
        })
        .collect::<Result<_>>()?;
    Ok(crate::metrics::pairwise_sum(&per_query) / queries.m() as f64)
}

/// NW local-mean variance against a large reference support, across support sizes.
pub fn exp_variance_scaling(cfg: &VarianceScalingConfig) -> Result<RunReport> {
    let cfg = cfg.resolved();
    if cfg.seeds.is_empty() {
        return Err(Error::ConfigError("seed list is empty".into()));
    }
    let mut rep = RunReport::new("variance-scaling", &cfg)?;
    let mut by_m = vec![0.0; cfg.m_grid.len()];
    for &seed in &cfg.seeds {
        let task = cfg.task(seed).instantiate()?;
        let s_ref = task.sample(cfg.m_ref, rng::child_seed(seed, purpose::REFERENCE, 0))?;
        let queries = task.sample(cfg.n_queries, rng::child_seed(seed, purpose::QUERY, 0))?;
        for (mi, &m) in cfg.m_grid.iter().enumerate() {
            let s = task.sample(m, rng::child_seed(seed, purpose::SUPPORT, m as u64))?;
            let h = (m as f64).powf(-1.0 / (4.0 + cfg.d as f64));
            let v = nw_discrepancy(&queries, &s, &s_ref, h)?;
            rep.push_row(row!("seed" => seed, "m" => m, "h" => h, "discrepancy" => v));
            by_m[mi] += v / cfg.seeds.len() as f64;
        }
    }
    let points: Vec<(f64, f64)> = cfg.m_grid.iter().zip(&by_m).map(|(&m, &v)| (m as f64, v)).collect();
    let fit = fit_power_law(&points)?;
    rep.aggregate("alpha", fit.alpha);
    rep.aggregate("r_squared", fit.r_squared);
    rep.aggregate("theory_4_over_4_plus_d", 4.0 / (4.0 + cfg.d as f64));
    let lo = cfg.alpha_min.unwrap_or(f64::NEG_INFINITY);
    let hi = cfg.alpha_max.unwrap_or(f64::INFINITY);
    rep.check("alpha", fit.alpha, format!("in [{lo}, {hi}]"), fit.alpha >= lo && fit.alpha <= hi);
    if let Some(r2) = cfg.r2_min {
        rep.check("r_squared", fit.r_squared, format!(">= {r2}"), fit.r_squared >= r2);
    }
    if cfg.family == VarianceFamily::Fourier {
        rep.notes.push("Fourier density is a random separable log-Fourier series (an interpretation)".into());
    }
    rep.fits.push(("seed_mean".into(), fit));
    rep.conclude();
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SphereRateConfig {
    pub d_k: usize,
    pub m_grid: Vec<usize>,
    /// `kappa = c * m^{2/(d_k+3)}`
    pub c_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub n_queries: usize,
    pub noise_std: f64,
    /// `null` freezes kappa at the best `c` evaluated at the smallest `m`.
    pub fixed_kappa: Option<f64>,
    pub tolerance: f64,
}

impl Default for SphereRateConfig {
    fn default() -> Self {
        SphereRateConfig {
            d_k: 3,
            m_grid: vec![100, 200, 400, 800, 1600, 3200, 6400],
            c_grid: vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
            seeds: seed_range(8),
            n_queries: 1000,
            noise_std: 0.5,
            fixed_kappa: None,
            tolerance: 0.15,
        }
    }
}

fn unit_rows(n: usize, d: usize, seed: u64, purpose: u64, index: u64) -> Result<SupportSet> {
    let mut r = rng::stream(seed, purpose, index);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let v: Vec<f64> = loop {
            let v: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
            if v.iter().map(|x| x * x).sum::<f64>() > 1e-20 {
                break v;
            }
        };
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| x / norm));
    }
    SupportSet::new(data, n, d)
}

/// Held-out MSE of vMF-kernel NW regression of `f(u) = scale * u_1` plus noise.
pub fn sphere_mse(
    d_k: usize,
    m: usize,
    kappa: f64,
    seed: u64,
    n_queries: usize,
    noise_std: f64,
    target_scale: f64,
) -> Result<f64> {
    let design = unit_rows(m, d_k, seed, purpose::SUPPORT, m as u64)?;
    let mut r = rng::stream(seed, purpose::EVAL, m as u64);
    let y: Vec<f64> = design
        .rows()
        .map(|u| target_scale * u[0] + noise_std * r.sample::<f64, _>(StandardNormal))
        .collect();
    let values = SupportSet::new(y, m, 1)?;
    let queries = unit_rows(n_queries, d_k, seed, purpose::QUERY, m as u64)?;
    let k = KernelSpec::vmf(kappa)?;
    let errs: Vec<f64> = (0..n_queries)
        .into_par_iter()
        .map(|i| {
            let q = queries.row(i);
            let est = kernels::local_mean(q, &design, &k, Some(&values))?[0];
            Ok((est - target_scale * q[0]).powi(2))
        })
        .collect::<Result<_>>()?;
    Ok(crate::metrics::pairwise_sum(&errs) / n_queries as f64)
}

/// Convergence rate of vMF NW regression on the sphere under `kappa ~ m^{2/(d_k+3)}`.
pub fn exp_sphere_rate(cfg: &SphereRateConfig) -> Result<RunReport> {
    if cfg.seeds.is_empty() || cfg.c_grid.is_empty() || cfg.m_grid.len() < 3 {
        return Err(Error::ConfigError("need seeds, a c grid and at least three m values".into()));
    }
    if cfg.d_k < 2 {
        return Err(Error::ConfigError("d_k must be >= 2".into()));
    }
    let exponent = 2.0 / (cfg.d_k as f64 + 3.0);
    let target = 4.0 / (cfg.d_k as f64 + 3.0);
    let mut rep = RunReport::new("sphere-rate", cfg)?;
    let curve = |kappa_of: &dyn Fn(usize) -> f64, scale: f64, noise: f64| -> Result<Vec<f64>> {
        cfg.m_grid
            .iter()
            .map(|&m| {
                let mut total = 0.0;
                for &seed in &cfg.seeds {
                    total += sphere_mse(cfg.d_k, m, kappa_of(m), seed, cfg.n_queries, noise, scale)?;
                }
                Ok(total / cfg.seeds.len() as f64)
            })
            .collect()
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for &c in &cfg.c_grid {
        let mse = curve(&|m| c * (m as f64).powf(exponent), 1.0, cfg.noise_std)?;
        for (&m, v) in cfg.m_grid.iter().zip(&mse) {
            rep.push_row(row!("schedule" => "scaled", "c" => c, "m" => m, "kappa" => c * (m as f64).powf(exponent), "mse" => v));
        }
        let mean = mse.iter().sum::<f64>() / mse.len() as f64;
        if best.as_ref().is_none_or(|(_, b)| mean < b.iter().sum::<f64>() / b.len() as f64) {
            best = Some((c, mse));
        }
    }
    let (c_best, mse_best) = best.expect("c grid is non-empty");
    let pts = |v: &[f64]| -> Vec<(f64, f64)> { cfg.m_grid.iter().zip(v).map(|(&m, &e)| (m as f64, e)).collect() };
    let fit = fit_power_law(&pts(&mse_best))?;
    let kappa_fixed = cfg.fixed_kappa.unwrap_or(c_best * (cfg.m_grid[0] as f64).powf(exponent));
    let mse_fixed = curve(&|_| kappa_fixed, 1.0, cfg.noise_std)?;
    for (&m, v) in cfg.m_grid.iter().zip(&mse_fixed) {
        rep.push_row(row!("schedule" => "fixed", "c" => serde_json::Value::Null, "m" => m, "kappa" => kappa_fixed, "mse" => v));
    }
    let fit_fixed = fit_power_law(&pts(&mse_fixed))?;
    let zero_target = cfg
        .m_grid
        .iter()
        .map(|&m| sphere_mse(cfg.d_k, m, c_best * (m as f64).powf(exponent), cfg.seeds[0], 100, 0.0, 0.0))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    rep.aggregate("c_best", c_best);
    rep.aggregate("alpha", fit.alpha);
    rep.aggregate("alpha_fixed_kappa", fit_fixed.alpha);
    rep.aggregate("kappa_fixed", kappa_fixed);
    rep.aggregate("target_exponent", target);
    rep.check(
        "alpha",
        fit.alpha,
        format!("within {} of {target}", cfg.tolerance),
        (fit.alpha - target).abs() <= cfg.tolerance,
    );
    rep.check("fixed_kappa_alpha", fit_fixed.alpha, format!("< {}", fit.alpha), fit_fixed.alpha < fit.alpha);
    rep.check("constant_target_mse", zero_target, "== 0".into(), zero_target == 0.0);
    rep.fits.push(("scaled_kappa".into(), fit));
    rep.fits.push(("fixed_kappa".into(), fit_fixed));
    rep.conclude();
    Ok(rep)
}
