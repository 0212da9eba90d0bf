//! Velocity fields driving the generation ODE.
//!
//! Production evaluation of the plug-in field works in the unscaled frame:
//!
//! ```text
//! l_i = -|x - t s_i|^2 / (2 sigma_t^2)            (= -|x/t - s_i|^2 / (2 h^2))
//! u   = (sum_i w_i s_i - (1 - sigma_min) x) / sigma_t
//! ```
//!
//! which is an exact rearrangement of `x~ + (m_h(x~) - x~) / sigma_t` with no
//! `1/t` factor. As `t -> 0` the bandwidth diverges, the weights become uniform
//! and the field tends to `mean(S) - (1 - sigma_min) x`, which is what `t = 0`
//! returns.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels::{self, check_spd, softmax_in_place, KernelSpec, SupportSet};
use crate::schedule::{FlowTime, PathSchedule};

/// Evaluation contract `(x, t) -> v` shared by all fields.
pub trait VelocityField: Send + Sync {
    fn dim(&self) -> usize;

    fn eval_into(&self, x: &[f64], t: FlowTime, out: &mut [f64]) -> Result<()>;

    fn eval(&self, x: &[f64], t: FlowTime) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, t, &mut out)?;
        Ok(out)
    }

    /// Precision matrix of the base law this field expects, if not the identity.
    fn base_precision(&self) -> Option<&DMatrix<f64>> {
        None
    }
}

/// Wraps a closure as a velocity field.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnField { dim, f }
    }
}

impl<F> VelocityField for FnField<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_into(&self, x: &[f64], t: FlowTime, out: &mut [f64]) -> Result<()> {
        (self.f)(x, t.get(), out);
        Ok(())
    }
}

fn check_point(x: &[f64], d: usize) -> Result<()> {
    if x.len() != d {
        return Err(Error::DimError { expected: d, got: x.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InputError("non-finite state".into()));
    }
    Ok(())
}

/// `(m - (1 - sigma_min) x) / sigma` into `out`, with `m = sum_i w_i s_i`.
fn stable_output(w: &[f64], s: &SupportSet, x: &[f64], sched: &PathSchedule, sigma: f64, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (wi, r) in w.iter().zip(s.rows()) {
        if *wi == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(r) {
            *o += wi * v;
        }
    }
    let decay = 1.0 - sched.sigma_min();
    let inv = 1.0 / sigma;
    for (o, xi) in out.iter_mut().zip(x) {
        *o = (*o - decay * xi) * inv;
    }
}

fn t0_limit(s: &SupportSet, sched: &PathSchedule, x: &[f64], out: &mut [f64]) {
    let mean = s.mean();
    let decay = 1.0 - sched.sigma_min();
    for ((o, mi), xi) in out.iter_mut().zip(&mean).zip(x) {
        *o = mi - decay * xi;
    }
}

/// The exact plug-in field induced by a finite support set.
#[derive(Debug, Clone)]
pub struct PluginField {
    pub support: SupportSet,
    pub sched: PathSchedule,
}

impl PluginField {
    pub fn new(support: SupportSet, sched: PathSchedule) -> Self {
        PluginField { support, sched }
    }
}

impl VelocityField for PluginField {
    fn dim(&self) -> usize {
        self.support.d()
    }

    fn eval_into(&self, x: &[f64], t: FlowTime, out: &mut [f64]) -> Result<()> {
        check_point(x, self.support.d())?;
        let tv = t.get();
        if tv == 0.0 {
            t0_limit(&self.support, &self.sched, x, out);
            return Ok(());
        }
        let sigma = self.sched.sigma_at(t);
        let c = 1.0 / (2.0 * sigma * sigma);
        let mut l: Vec<f64> = self
            .support
            .rows()
            .map(|r| -r.iter().zip(x).map(|(si, xi)| (xi - tv * si).powi(2)).sum::<f64>() * c)
            .collect();
        softmax_in_place(&mut l);
        stable_output(&l, &self.support, x, &self.sched, sigma, out);
        Ok(())
    }
}

pub fn plugin_velocity(f: &PluginField, x: &[f64], t: FlowTime) -> Result<Vec<f64>> {
    f.eval(x, t)
}

/// `A_t(x~, z) = x~ + (z - x~) / sigma_t`.
pub fn affine_postmap(x_tilde: &[f64], z: &[f64], sigma_t: f64) -> Vec<f64> {
    x_tilde.iter().zip(z).map(|(xt, zi)| xt + (zi - xt) / sigma_t).collect()
}

/// One Gaussian-kernel attention head on the de-scaled query, followed by
/// the affine post-map. Undefined at `t = 0`.
pub fn attention_realized_velocity(
    s: &SupportSet,
    sched: &PathSchedule,
    x: &[f64],
    t: FlowTime,
) -> Result<Vec<f64>> {
    check_point(x, s.d())?;
    let h = sched.bandwidth_at(t)?;
    let tv = t.get();
    let x_tilde: Vec<f64> = x.iter().map(|v| v / tv).collect();
    let attn = kernels::local_mean(&x_tilde, s, &KernelSpec::isotropic(h)?, None)?;
    Ok(affine_postmap(&x_tilde, &attn, sched.sigma_at(t)))
}

/// `u_t(x) = x/t + (sigma_t/t) * score(x)` for a caller-supplied score of `p_t`.
pub fn velocity_from_score<F>(x: &[f64], t: FlowTime, score_at: F, sched: &PathSchedule) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if t.get() == 0.0 {
        return Err(Error::DivergentBandwidth);
    }
    let tv = t.get();
    let ratio = sched.sigma_at(t) / tv;
    let score = score_at(x);
    if score.len() != x.len() {
        return Err(Error::DimError { expected: x.len(), got: score.len() });
    }
    Ok(x.iter().zip(&score).map(|(xi, si)| xi / tv + ratio * si).collect())
}

/// Analytic score of the path marginal `p_t^S`, `(t m - x) / sigma_t^2`.
pub fn path_score(s: &SupportSet, sched: &PathSchedule, x: &[f64], t: FlowTime) -> Result<Vec<f64>> {
    check_point(x, s.d())?;
    let tv = t.get();
    let sigma = sched.sigma_at(t);
    let c = 1.0 / (2.0 * sigma * sigma);
    let mut l: Vec<f64> = s
        .rows()
        .map(|r| -r.iter().zip(x).map(|(si, xi)| (xi - tv * si).powi(2)).sum::<f64>() * c)
        .collect();
    softmax_in_place(&mut l);
    let m = kernels::weighted_rows(&l, s);
    let inv = 1.0 / (sigma * sigma);
    Ok(m.iter().zip(x).map(|(mi, xi)| (tv * mi - xi) * inv).collect())
}

/// Feature lift turning the Gaussian logit into a plain inner product in `R^{d+2}`:
/// `Q = [x~/h, -|x~|^2/(2h^2), 1]`, `K = [s/h, 1, -|s|^2/(2h^2)]`.
pub fn dot_product_lift(x_tilde: &[f64], s: &[f64], h: f64) -> (Vec<f64>, Vec<f64>, f64) {
    let c = 1.0 / (2.0 * h * h);
    let mut q: Vec<f64> = x_tilde.iter().map(|v| v / h).collect();
    q.push(-kernels::dot(x_tilde, x_tilde) * c);
    q.push(1.0);
    let mut k: Vec<f64> = s.iter().map(|v| v / h).collect();
    k.push(1.0);
    k.push(-kernels::dot(s, s) * c);
    let logit = kernels::dot(&q, &k);
    (q, k, logit)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `d_k x d_model`
    pub wq: DMatrix<f64>,
    /// `d_k x d_model`
    pub wk: DMatrix<f64>,
    /// `d_k x d_model`
    pub wv: DMatrix<f64>,
    /// `d_model x d_k`
    pub wo: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadParams {
    pub heads: Vec<Head>,
    pub d_model: usize,
    pub d_k: usize,
}

impl MultiHeadParams {
    /// Validates shapes. With `strict_split`, also requires `H * d_k == d_model`.
    pub fn new(heads: Vec<Head>, d_model: usize, d_k: usize, strict_split: bool) -> Result<Self> {
        if heads.is_empty() || d_model == 0 || d_k == 0 {
            return Err(Error::InvalidParameter("need at least one head and positive widths".into()));
        }
        if strict_split && heads.len() * d_k != d_model {
            return Err(Error::InvalidParameter(format!(
                "H * d_k = {} != d_model = {d_model}",
                heads.len() * d_k
            )));
        }
        for hd in &heads {
            for (m, r, c) in [(&hd.wq, d_k, d_model), (&hd.wk, d_k, d_model), (&hd.wv, d_k, d_model), (&hd.wo, d_model, d_k)] {
                if m.nrows() != r || m.ncols() != c {
                    return Err(Error::DimError { expected: r * c, got: m.nrows() * m.ncols() });
                }
            }
        }
        Ok(MultiHeadParams { heads, d_model, d_k })
    }

    /// Gaussian projections with entries `N(0, 1/d_model)` (and `N(0, 1/d_k)` for `W_O`).
    pub fn random<R: Rng>(n_heads: usize, d_model: usize, d_k: usize, rng: &mut R) -> Result<Self> {
        let mut gauss = |r: usize, c: usize, scale: f64| {
            DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal) * scale)
        };
        let sm = 1.0 / (d_model as f64).sqrt();
        let sk = 1.0 / (d_k as f64).sqrt();
        let heads = (0..n_heads)
            .map(|_| Head {
                wq: gauss(d_k, d_model, sm),
                wk: gauss(d_k, d_model, sm),
                wv: gauss(d_k, d_model, sm),
                wo: gauss(d_model, d_k, sk),
            })
            .collect();
        MultiHeadParams::new(heads, d_model, d_k, false)
    }
}

/// Standard multi-head cross-attention of one query against the rows of `z`.
pub fn multihead_forward(p: &MultiHeadParams, q: &[f64], z: &SupportSet) -> Result<Vec<f64>> {
    if q.len() != p.d_model || z.d() != p.d_model {
        return Err(Error::DimError { expected: p.d_model, got: if q.len() != p.d_model { q.len() } else { z.d() } });
    }
    let scale = (p.d_k as f64).sqrt();
    let qv = DVector::from_column_slice(q);
    let mut out = DVector::<f64>::zeros(p.d_model);
    for hd in &p.heads {
        let qh = &hd.wq * &qv;
        let mut alpha = Vec::with_capacity(z.m());
        let mut vals = Vec::with_capacity(z.m());
        for r in z.rows() {
            let zr = DVector::from_column_slice(r);
            alpha.push(qh.dot(&(&hd.wk * &zr)) / scale);
            vals.push(&hd.wv * &zr);
        }
        softmax_in_place(&mut alpha);
        let mut head_out = DVector::<f64>::zeros(p.d_k);
        for (a, v) in alpha.iter().zip(&vals) {
            head_out += v * *a;
        }
        out += &hd.wo * head_out;
    }
    Ok(out.as_slice().to_vec())
}

/// The same map written as a sum of generalized NW estimators, one per head,
/// each with bilinear kernel `exp(x^T W_Q^T W_K s / sqrt(d_k))` and values `W_V z_i`.
pub fn multihead_nw_ensemble(p: &MultiHeadParams, q: &[f64], z: &SupportSet) -> Result<Vec<f64>> {
    let scale = (p.d_k as f64).sqrt();
    let mut out = vec![0.0; p.d_model];
    for hd in &p.heads {
        let a = hd.wq.transpose() * &hd.wk;
        let kernel = KernelSpec::bilinear(a, scale)?;
        let wv = &hd.wv;
        let values = z.map_rows(p.d_k, |r, o| {
            let v = wv * DVector::from_column_slice(r);
            o.copy_from_slice(v.as_slice());
        })?;
        let m = kernels::local_mean(q, z, &kernel, Some(&values))?;
        let proj = &hd.wo * DVector::from_vec(m);
        for (o, v) in out.iter_mut().zip(proj.iter()) {
            *o += v;
        }
    }
    Ok(out)
}

pub const RANK_RTOL: f64 = 1e-10;

/// Numerical rank of `W_Q^T W_K / sqrt(d_k)` for one head.
pub fn logit_rank(p: &MultiHeadParams, head: usize) -> Result<usize> {
    let hd = p
        .heads
        .get(head)
        .ok_or_else(|| Error::InvalidParameter(format!("head {head} out of range")))?;
    let a = hd.wq.transpose() * &hd.wk / (p.d_k as f64).sqrt();
    let sv = a.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&v| v > RANK_RTOL * max).count())
}

/// Plug-in field under a Mahalanobis metric `M`, paired with base noise `N(0, M^{-1})`.
#[derive(Debug, Clone)]
pub struct AnisotropicField {
    pub support: SupportSet,
    pub sched: PathSchedule,
    metric: DMatrix<f64>,
}

impl AnisotropicField {
    pub fn new(support: SupportSet, sched: PathSchedule, metric: DMatrix<f64>) -> Result<Self> {
        if metric.nrows() != support.d() {
            return Err(Error::DimError { expected: support.d(), got: metric.nrows() });
        }
        check_spd(&metric)?;
        Ok(AnisotropicField { support, sched, metric })
    }

    pub fn metric(&self) -> &DMatrix<f64> {
        &self.metric
    }
}

impl VelocityField for AnisotropicField {
    fn dim(&self) -> usize {
        self.support.d()
    }

    fn eval_into(&self, x: &[f64], t: FlowTime, out: &mut [f64]) -> Result<()> {
        check_point(x, self.support.d())?;
        let tv = t.get();
        if tv == 0.0 {
            t0_limit(&self.support, &self.sched, x, out);
            return Ok(());
        }
        let sigma = self.sched.sigma_at(t);
        // (x - t s) / t = x~ - s, so scaling the Mahalanobis logit by t^2 keeps h(t) out.
        let kernel = KernelSpec::Mahalanobis { h: sigma, metric: self.metric.clone() };
        let scaled = self.support.map_rows(self.support.d(), |r, o| {
            for (oi, ri) in o.iter_mut().zip(r) {
                *oi = tv * ri;
            }
        })?;
        let mut l = kernels::logits(x, &scaled, &kernel)?;
        softmax_in_place(&mut l);
        stable_output(&l, &self.support, x, &self.sched, sigma, out);
        Ok(())
    }

    fn base_precision(&self) -> Option<&DMatrix<f64>> {
        Some(&self.metric)
    }
}

pub fn anisotropic_velocity(f: &AnisotropicField, x: &[f64], t: FlowTime) -> Result<Vec<f64>> {
    f.eval(x, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn ft(v: f64) -> FlowTime {
        FlowTime::new(v).unwrap()
    }

    /// Velocity evaluated literally in the de-scaled frame; test-only reference path.
    fn descaled_reference(s: &SupportSet, sched: &PathSchedule, x: &[f64], t: f64) -> Vec<f64> {
        let sigma = 1.0 - (1.0 - sched.sigma_min()) * t;
        let h = sigma / t;
        let xt: Vec<f64> = x.iter().map(|v| v / t).collect();
        let m = kernels::local_mean(&xt, s, &KernelSpec::isotropic(h).unwrap(), None).unwrap();
        xt.iter().zip(&m).map(|(a, b)| a + (b - a) / sigma).collect()
    }

    fn random_support(rng: &mut impl Rng, m: usize, d: usize) -> SupportSet {
        let data = (0..m * d).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0).collect();
        SupportSet::new(data, m, d).unwrap()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn single_point_closed_form() {
        let sched = PathSchedule::new(0.01).unwrap();
        let s = SupportSet::new(vec![1.0, -2.0], 1, 2).unwrap();
        let f = PluginField::new(s, sched);
        let x = [0.3, 0.4];
        for &t in &[0.1, 0.5, 1.0] {
            let u = plugin_velocity(&f, &x, ft(t)).unwrap();
            let sigma = sched.sigma_at(ft(t));
            let xt = [x[0] / t, x[1] / t];
            let expect = [xt[0] + (1.0 - xt[0]) / sigma, xt[1] + (-2.0 - xt[1]) / sigma];
            assert!(max_abs_diff(&u, &expect) < 1e-12);
        }
        // late-time pull at t = 1: (s - (1 - sigma_min) x) / sigma_min
        let u = plugin_velocity(&f, &x, FlowTime::ONE).unwrap();
        let expect = [(1.0 - 0.99 * 0.3) / 0.01, (-2.0 - 0.99 * 0.4) / 0.01];
        assert!(max_abs_diff(&u, &expect) < 1e-10);
    }

    #[test]
    fn t0_limit_and_continuity() {
        let sched = PathSchedule::new(0.01).unwrap();
        let s = SupportSet::new(vec![0.0, 2.0, 5.0], 3, 1).unwrap();
        let f = PluginField::new(s, sched);
        let x = [0.7];
        let u0 = plugin_velocity(&f, &x, FlowTime::ZERO).unwrap();
        assert!((u0[0] - (7.0 / 3.0 - 0.99 * 0.7)).abs() < 1e-14);
        let near = descaled_reference(&f.support, &sched, &x, 1e-6);
        assert!(((near[0] - u0[0]) / u0[0]).abs() <= 1e-4);
    }

    #[test]
    fn worked_scalar_example() {
        // d=1, S={0,2}, sigma_min=0.01, t=0.5: sigma=0.505, x~=0.5, h=1.01
        let sched = PathSchedule::new(0.01).unwrap();
        let s = SupportSet::new(vec![0.0, 2.0], 2, 1).unwrap();
        let f = PluginField::new(s.clone(), sched);
        let u = plugin_velocity(&f, &[0.25], ft(0.5)).unwrap();
        // oracle: two-point softmax at x~=0.5, h=1.01, then x~ + (m - x~)/sigma
        let h: f64 = 1.01;
        let l0 = -(0.5f64 * 0.5) / (2.0 * h * h);
        let l1 = -(1.5f64 * 1.5) / (2.0 * h * h);
        let w1 = l1.exp() / (l0.exp() + l1.exp());
        let oracle = 0.5 + (2.0 * w1 - 0.5) / 0.505;
        assert!((u[0] - oracle).abs() < 1e-13);
        // frozen from a 40-digit evaluation
        assert!((u[0] - 0.590_427_900_733_507_1).abs() < 1e-12);
        let a = attention_realized_velocity(&s, &sched, &[0.25], ft(0.5)).unwrap();
        assert!((a[0] - u[0]).abs() < 1e-12);
    }

    #[test]
    fn affine_postmap_examples() {
        assert_eq!(affine_postmap(&[0.3, -1.0], &[0.3, -1.0], 0.2), vec![0.3, -1.0]);
        assert_eq!(affine_postmap(&[0.3, -1.0], &[5.0, 7.0], 1.0), vec![5.0, 7.0]);
        let v = affine_postmap(&[0.5], &[0.2384], 0.505);
        assert!((v[0] - (0.5 + (0.2384 - 0.5) / 0.505)).abs() < 1e-15);
        assert!((v[0] - (-0.018_019_801_980_198_02)).abs() < 1e-12);
    }

    #[test]
    fn attention_matches_plugin_on_random_configs() {
        let mut r = rng::stream(11, rng::purpose::FUZZ, 0);
        let sched = PathSchedule::new(0.01).unwrap();
        for _ in 0..200 {
            let d = [1, 2, 4, 8, 16][r.random_range(0..5)];
            let m = r.random_range(1..=64);
            let t = r.random_range(1e-3..=1.0);
            let s = random_support(&mut r, m, d);
            let x: Vec<f64> = (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            let f = PluginField::new(s.clone(), sched);
            let a = attention_realized_velocity(&s, &sched, &x, ft(t)).unwrap();
            let b = plugin_velocity(&f, &x, ft(t)).unwrap();
            assert!(max_abs_diff(&a, &b) <= 1e-10, "d={d} m={m} t={t}");
        }
        let s = SupportSet::new(vec![1.0], 1, 1).unwrap();
        assert!(matches!(attention_realized_velocity(&s, &sched, &[0.0], FlowTime::ZERO), Err(Error::DivergentBandwidth)));
    }

    #[test]
    fn attention_single_point_is_postmap() {
        let sched = PathSchedule::new(0.05).unwrap();
        let s = SupportSet::new(vec![1.0, 3.0], 1, 2).unwrap();
        let t = ft(0.4);
        let a = attention_realized_velocity(&s, &sched, &[0.2, 0.2], t).unwrap();
        let b = affine_postmap(&[0.5, 0.5], &[1.0, 3.0], sched.sigma_at(t));
        assert!(max_abs_diff(&a, &b) < 1e-14);
    }

    #[test]
    fn score_route_matches() {
        let sched = PathSchedule::new(0.01).unwrap();
        let mut r = rng::stream(5, rng::purpose::FUZZ, 1);
        let s = random_support(&mut r, 7, 3);
        let f = PluginField::new(s.clone(), sched);
        assert_eq!(velocity_from_score(&[1.0, 2.0], FlowTime::ONE, |_| vec![0.0, 0.0], &sched).unwrap(), vec![1.0, 2.0]);
        for &t in &[0.05, 0.3, 0.8, 1.0] {
            let x: Vec<f64> = (0..3).map(|_| r.sample::<f64, _>(StandardNormal) * t).collect();
            let t = ft(t);
            let via = velocity_from_score(&x, t, |y| path_score(&s, &sched, y, t).unwrap(), &sched).unwrap();
            let direct = plugin_velocity(&f, &x, t).unwrap();
            assert!(max_abs_diff(&via, &direct) <= 1e-10 * direct.iter().fold(1.0f64, |a, v| a.max(v.abs())));
        }
        assert!(matches!(
            velocity_from_score(&[0.0], FlowTime::ZERO, |_| vec![0.0], &sched),
            Err(Error::DivergentBandwidth)
        ));
    }

    #[test]
    fn dot_product_lift_examples() {
        let (_, _, l) = dot_product_lift(&[0.3, 0.4], &[0.3, 0.4], 0.7);
        assert!(l.abs() < 1e-15);
        let (q, k, l) = dot_product_lift(&[0.0], &[2.0], 1.0);
        assert_eq!(q.len(), 3);
        assert_eq!(k.len(), 3);
        assert_eq!(l, -2.0);
    }

    #[test]
    fn multihead_trivial_cases() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let hd = Head { wq: eye.clone(), wk: eye.clone(), wv: eye.clone(), wo: eye.clone() };
        let p = MultiHeadParams::new(vec![hd], 2, 2, true).unwrap();
        let z = SupportSet::new(vec![0.5, -1.5], 1, 2).unwrap();
        assert_eq!(multihead_forward(&p, &[3.0, 1.0], &z).unwrap(), vec![0.5, -1.5]);

        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut p = MultiHeadParams::random(2, 4, 2, &mut r).unwrap();
        for hd in &mut p.heads {
            hd.wv.fill(0.0);
        }
        let z = SupportSet::new((0..12).map(|i| i as f64 * 0.1).collect(), 3, 4).unwrap();
        assert_eq!(multihead_forward(&p, &[1.0, 0.0, 0.0, 0.0], &z).unwrap(), vec![0.0; 4]);
        assert!(MultiHeadParams::new(p.heads.clone(), 4, 2, true).is_ok());
        assert!(MultiHeadParams::new(p.heads.clone(), 4, 3, false).is_err());
        assert!(multihead_forward(&p, &[1.0, 0.0], &z).is_err());
    }

    #[test]
    fn multihead_equals_nw_ensemble() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let p = MultiHeadParams::random(4, 8, 2, &mut r).unwrap();
        let z = random_support(&mut r, 5, 8);
        let q: Vec<f64> = (0..8).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let a = multihead_forward(&p, &q, &z).unwrap();
        let b = multihead_nw_ensemble(&p, &q, &z).unwrap();
        assert!(max_abs_diff(&a, &b) <= 1e-12);
    }

    #[test]
    fn logit_rank_cases() {
        let d_k = 2;
        let d_model = 5;
        let embed = DMatrix::from_fn(d_k, d_model, |i, j| if i == j { 1.0 } else { 0.0 });
        let hd = Head { wq: embed.clone(), wk: embed.clone(), wv: embed.clone(), wo: embed.transpose() };
        let p = MultiHeadParams::new(vec![hd.clone()], d_model, d_k, false).unwrap();
        assert_eq!(logit_rank(&p, 0).unwrap(), d_k);
        let mut zero = hd;
        zero.wk.fill(0.0);
        let p = MultiHeadParams::new(vec![zero], d_model, d_k, false).unwrap();
        assert_eq!(logit_rank(&p, 0).unwrap(), 0);
        assert!(logit_rank(&p, 1).is_err());
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let p = MultiHeadParams::random(4, 16, 4, &mut r).unwrap();
        for h in 0..4 {
            assert_eq!(logit_rank(&p, h).unwrap(), 4);
        }
    }

    #[test]
    fn anisotropic_identity_reduces_to_plugin() {
        let sched = PathSchedule::new(0.01).unwrap();
        let mut r = rng::stream(8, rng::purpose::FUZZ, 2);
        let s = random_support(&mut r, 9, 3);
        let plug = PluginField::new(s.clone(), sched);
        let an = AnisotropicField::new(s, sched, DMatrix::identity(3, 3)).unwrap();
        for &t in &[0.0, 0.01, 0.4, 1.0] {
            let x = [0.2, -0.5, 0.9];
            let a = anisotropic_velocity(&an, &x, ft(t)).unwrap();
            let b = plugin_velocity(&plug, &x, ft(t)).unwrap();
            assert!(max_abs_diff(&a, &b) <= 1e-12 * b.iter().fold(1.0f64, |m, v| m.max(v.abs())));
        }
    }

    #[test]
    fn anisotropic_direct_metric_oracle() {
        // M = diag(4, 1), support on the x-axis
        let sched = PathSchedule::new(0.01).unwrap();
        let s = SupportSet::new(vec![-1.0, 0.0, 0.5, 0.0, 2.0, 0.0], 3, 2).unwrap();
        let metric = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let f = AnisotropicField::new(s.clone(), sched, metric).unwrap();
        let t = 0.6;
        let x = [0.3, 0.45];
        let u = anisotropic_velocity(&f, &x, ft(t)).unwrap();
        let sigma = 1.0 - 0.99 * t;
        let h = sigma / t;
        let xt = [x[0] / t, x[1] / t];
        let l: Vec<f64> = s
            .rows()
            .map(|r| -(4.0 * (xt[0] - r[0]).powi(2) + (xt[1] - r[1]).powi(2)) / (2.0 * h * h))
            .collect();
        let z: f64 = l.iter().map(|v| v.exp()).sum();
        let m0: f64 = l.iter().zip(s.rows()).map(|(li, r)| li.exp() / z * r[0]).sum();
        let expect = [xt[0] + (m0 - xt[0]) / sigma, xt[1] + (0.0 - xt[1]) / sigma];
        assert!(max_abs_diff(&u, &expect) < 1e-11);
    }

    #[test]
    fn anisotropic_single_point_pull() {
        let sched = PathSchedule::new(0.1).unwrap();
        let s = SupportSet::new(vec![2.0, -1.0], 1, 2).unwrap();
        let metric = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let f = AnisotropicField::new(s.clone(), sched, metric).unwrap();
        let p = PluginField::new(s, sched);
        let a = anisotropic_velocity(&f, &[0.1, 0.7], ft(0.3)).unwrap();
        let b = plugin_velocity(&p, &[0.1, 0.7], ft(0.3)).unwrap();
        assert!(max_abs_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn rejects_non_finite_state() {
        let f = PluginField::new(SupportSet::new(vec![0.0], 1, 1).unwrap(), PathSchedule::default());
        assert!(matches!(plugin_velocity(&f, &[f64::NAN], ft(0.5)), Err(Error::InputError(_))));
    }

    proptest! {
        #[test]
        fn rotation_equivariance(seed in 0u64..1000, t in 1e-3f64..=1.0) {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let d = 3;
            let s = random_support(&mut r, 6, d);
            let g = DMatrix::from_fn(d, d, |_, _| r.sample::<f64, _>(StandardNormal));
            let u = g.qr().q();
            let rot = s.map_rows(d, |row, o| {
                let v = &u * DVector::from_column_slice(row);
                o.copy_from_slice(v.as_slice());
            }).unwrap();
            let x = DVector::from_fn(d, |_, _| r.sample::<f64, _>(StandardNormal));
            let sched = PathSchedule::default();
            let ux = &u * &x;
            let lhs = plugin_velocity(&PluginField::new(rot, sched), ux.as_slice(), ft(t)).unwrap();
            let base = plugin_velocity(&PluginField::new(s, sched), x.as_slice(), ft(t)).unwrap();
            let rhs = &u * DVector::from_vec(base);
            prop_assert!(max_abs_diff(&lhs, rhs.as_slice()) <= 1e-10 * rhs.amax().max(1.0));
        }

        #[test]
        fn lift_inner_product_is_gaussian_logit(
            x in proptest::collection::vec(-10.0f64..10.0, 4),
            s in proptest::collection::vec(-10.0f64..10.0, 4),
            h in 0.05f64..20.0,
        ) {
            let (_, _, l) = dot_product_lift(&x, &s, h);
            let direct = -kernels::sq_dist(&x, &s) / (2.0 * h * h);
            prop_assert!((l - direct).abs() <= 1e-12 * direct.abs().max(1.0));
        }
    }
}
