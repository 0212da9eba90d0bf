//! Two-sample metrics, bandwidth selection, n_eff summaries, power-law fits.

use std::cmp::Ordering;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, sq_dist, KernelSpec, SupportSet};
use crate::rng::{self, purpose};
use crate::schedule::{FlowTime, PathSchedule};

pub const MEDIAN_SUBSAMPLE: usize = 2000;
pub const C2ST_MIN_N: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mmd2Result {
    pub value: f64,
    pub kernel_bandwidth: f64,
    pub n_x: usize,
    pub n_y: usize,
}

/// Sum in a fixed binary-tree order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

fn canonical_order(x: &SupportSet, y: &SupportSet) -> Ordering {
    x.m().cmp(&y.m()).then_with(|| {
        x.as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

fn gram_sum(a: &SupportSet, b: &SupportSet, gamma: f64, skip_diagonal: bool) -> f64 {
    let rows: Vec<f64> = (0..a.m())
        .into_par_iter()
        .map(|i| {
            let ai = a.row(i);
            let vals: Vec<f64> = (0..b.m())
                .filter(|&j| !(skip_diagonal && i == j))
                .map(|j| (-gamma * sq_dist(ai, b.row(j))).exp())
                .collect();
            pairwise_sum(&vals)
        })
        .collect();
    pairwise_sum(&rows)
}

/// Unbiased Gaussian-kernel MMD² U-statistic.
pub fn mmd2_unbiased(x: &SupportSet, y: &SupportSet, bandwidth: f64) -> Result<Mmd2Result> {
    if x.m() < 2 || y.m() < 2 {
        return Err(Error::SizeError { min: 2, got: x.m().min(y.m()) });
    }
    if x.d() != y.d() {
        return Err(Error::DimError { expected: x.d(), got: y.d() });
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let (n_x, n_y) = (x.m(), y.m());
    // evaluate in a canonical argument order so the result is exactly symmetric
    let (a, b) = if canonical_order(x, y) == Ordering::Greater { (y, x) } else { (x, y) };
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let na = a.m() as f64;
    let nb = b.m() as f64;
    let aa = gram_sum(a, a, gamma, true) / (na * (na - 1.0));
    let bb = gram_sum(b, b, gamma, true) / (nb * (nb - 1.0));
    let ab = gram_sum(a, b, gamma, false) / (na * nb);
    Ok(Mmd2Result { value: aa + bb - 2.0 * ab, kernel_bandwidth: bandwidth, n_x, n_y })
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

pub fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

pub fn median(v: &[f64]) -> f64 {
    quantile_sorted(&sorted(v), 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub iqr: f64,
    pub min: f64,
    pub max: f64,
}

pub fn summarize(v: &[f64]) -> Summary {
    let s = sorted(v);
    let q25 = quantile_sorted(&s, 0.25);
    let q75 = quantile_sorted(&s, 0.75);
    Summary {
        median: quantile_sorted(&s, 0.5),
        q25,
        q75,
        iqr: q75 - q25,
        min: s.first().copied().unwrap_or(f64::NAN),
        max: s.last().copied().unwrap_or(f64::NAN),
    }
}

/// Median pairwise distance of the pooled sample divided by √2.
pub fn median_heuristic(x: &SupportSet, y: &SupportSet) -> Result<f64> {
    if x.d() != y.d() {
        return Err(Error::DimError { expected: x.d(), got: y.d() });
    }
    let mut pooled: Vec<&[f64]> = x.rows().chain(y.rows()).collect();
    if pooled.len() < 2 {
        return Err(Error::SizeError { min: 2, got: pooled.len() });
    }
    if pooled.len() > MEDIAN_SUBSAMPLE {
        let mut r = rng::stream(0, purpose::SUBSAMPLE, 2);
        let idx = rand::seq::index::sample(&mut r, pooled.len(), MEDIAN_SUBSAMPLE).into_vec();
        pooled = idx.into_iter().map(|i| pooled[i]).collect();
    }
    let n = pooled.len();
    let mut dists: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let pi = pooled[i];
            let rest = &pooled[i + 1..];
            rest.iter().map(move |pj| sq_dist(pi, pj).sqrt())
        })
        .collect();
    let k = dists.len();
    let med = if k % 2 == 1 {
        *dists.select_nth_unstable_by(k / 2, f64::total_cmp).1
    } else {
        let hi = *dists.select_nth_unstable_by(k / 2, f64::total_cmp).1;
        let lo = dists[..k / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    };
    if !(med > 0.0) {
        return Err(Error::DegenerateScale);
    }
    Ok(med / std::f64::consts::SQRT_2)
}

/// Leave-one-out 1-NN accuracy on the pooled labeled sample. Exact distance
/// ties among nearest neighbours give fractional credit equal to the share of
/// tied neighbours carrying the query's label.
pub fn c2st_1nn(x: &SupportSet, y: &SupportSet) -> Result<f64> {
    if x.m() != y.m() {
        return Err(Error::InvalidParameter(format!("C2ST needs equal sizes, got {} and {}", x.m(), y.m())));
    }
    if x.m() < C2ST_MIN_N {
        return Err(Error::SizeError { min: C2ST_MIN_N, got: x.m() });
    }
    if x.d() != y.d() {
        return Err(Error::DimError { expected: x.d(), got: y.d() });
    }
    let n = x.m();
    let point = |i: usize| if i < n { x.row(i) } else { y.row(i - n) };
    let credit: Vec<f64> = (0..2 * n)
        .into_par_iter()
        .map(|i| {
            let pi = point(i);
            let mut best = f64::INFINITY;
            let (mut same, mut total) = (0usize, 0usize);
            for j in (0..2 * n).filter(|&j| j != i) {
                let dist = sq_dist(pi, point(j));
                match dist.total_cmp(&best) {
                    Ordering::Less => {
                        best = dist;
                        same = 0;
                        total = 0;
                    }
                    Ordering::Greater => continue,
                    Ordering::Equal => {}
                }
                total += 1;
                if (j < n) == (i < n) {
                    same += 1;
                }
            }
            same as f64 / total as f64
        })
        .collect();
    Ok(pairwise_sum(&credit) / (2 * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeffStats {
    pub t: f64,
    pub h: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

/// n_eff of the de-scaled NW weights for queries drawn from the path marginal `p_t^S`.
pub fn neff_profile(
    s: &SupportSet,
    sched: &PathSchedule,
    t_grid: &[FlowTime],
    n_queries: usize,
    seed: u64,
) -> Result<Vec<NeffStats>> {
    if n_queries == 0 {
        return Err(Error::InvalidParameter("n_queries must be >= 1".into()));
    }
    t_grid
        .iter()
        .enumerate()
        .map(|(ti, &t)| {
            let h = sched.bandwidth_at(t)?;
            let sigma = sched.sigma_at(t);
            let k = KernelSpec::isotropic(h)?;
            let neff: Vec<f64> = (0..n_queries)
                .into_par_iter()
                .map(|q| {
                    let mut r = rng::stream(seed, purpose::QUERY, ((ti as u64) << 32) | q as u64);
                    let row = s.row(r.random_range(0..s.m()));
                    let x_tilde: Vec<f64> = row
                        .iter()
                        .map(|v| (t.get() * v + sigma * r.sample::<f64, _>(StandardNormal)) / t.get())
                        .collect();
                    kernels::nw_weights(&x_tilde, s, &k).map(|w| w.neff)
                })
                .collect::<Result<_>>()?;
            let sum = summarize(&neff);
            Ok(NeffStats { t: t.get(), h, median: sum.median, q25: sum.q25, q75: sum.q75 })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub alpha: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: Vec<(f64, f64)>,
}

/// OLS of `log value` on `log m`; `alpha = -slope`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(Error::SizeError { min: 3, got: points.len() });
    }
    for &(m, v) in points {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::LogDomainError(v));
        }
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::LogDomainError(m));
        }
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("power-law fit needs at least two distinct m".into()));
    }
    let spread = ys.iter().map(|y| (y - my).abs()).fold(0.0, f64::max);
    if spread <= 1e-14 * my.abs().max(1.0) {
        return Ok(RateFit { alpha: 0.0, intercept: my, r_squared: 0.0, points: points.to_vec() });
    }
    let slope = sxy / sxx;
    Ok(RateFit {
        alpha: -slope,
        intercept: my - slope * mx,
        r_squared: (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0),
        points: points.to_vec(),
    })
}
