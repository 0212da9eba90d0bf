//! Nadaraya-Watson weights, local means, and the de-scaled Gaussian KDE.
//!
//! Weights are a max-subtracted softmax over kernel logits. Gaussian
//! normalization constants cancel in the weights and are never formed there;
//! they appear only in the absolute densities below.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Unit-norm tolerance for the vMF kernel.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Ridge added to low-rank metrics `L^T L`.
pub const LOW_RANK_RIDGE: f64 = 1e-8;

/// `m` points in `R^d`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportSet {
    data: Vec<f64>,
    m: usize,
    d: usize,
}

impl SupportSet {
    pub fn new(data: Vec<f64>, m: usize, d: usize) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::InvalidParameter(format!(
                "support set needs m >= 1 and d >= 1 (got m={m}, d={d})"
            )));
        }
        if data.len() != m * d {
            return Err(Error::DimError { expected: m * d, got: data.len() });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::DataError(format!(
                "non-finite entry at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        Ok(SupportSet { data, m, d })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::DimError { expected: d, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        SupportSet::new(data, rows.len(), d)
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.d)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for r in self.rows() {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        let inv = 1.0 / self.m as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }

    /// Applies `f` to each row, producing a table of width `p`.
    pub fn map_rows(&self, p: usize, mut f: impl FnMut(&[f64], &mut [f64])) -> Result<SupportSet> {
        let mut data = vec![0.0; self.m * p];
        for (r, out) in self.rows().zip(data.chunks_exact_mut(p)) {
            f(r, out);
        }
        SupportSet::new(data, self.m, p)
    }

    /// First `k` rows.
    pub fn head(&self, k: usize) -> Result<SupportSet> {
        let k = k.min(self.m);
        SupportSet::new(self.data[..k * self.d].to_vec(), k, self.d)
    }
}

/// The kernel defining NW weights. Construct through the checked constructors.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    /// `l_i = -|x - s_i|^2 / (2 h^2)`.
    IsotropicGaussian { h: f64 },
    /// `l_i = -(x - s_i)^T M (x - s_i) / (2 h^2)`, `M` symmetric positive-definite.
    Mahalanobis { h: f64, metric: DMatrix<f64> },
    /// `l_i = x . (A s_i) / scale`.
    BilinearLogit { a: DMatrix<f64>, scale: f64 },
    /// `l_i = kappa x . s_i` on the unit sphere.
    Vmf { kappa: f64 },
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must be positive and finite, got {v}")))
    }
}

/// Attempts a Cholesky factorization after a symmetry check.
pub fn check_spd(metric: &DMatrix<f64>) -> Result<()> {
    if !metric.is_square() {
        return Err(Error::DimError { expected: metric.nrows(), got: metric.ncols() });
    }
    if metric.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite);
    }
    let scale = metric.amax().max(1.0);
    let n = metric.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (metric[(i, j)] - metric[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::NotPositiveDefinite);
            }
        }
    }
    metric.clone().cholesky().map(|_| ()).ok_or(Error::NotPositiveDefinite)
}

impl KernelSpec {
    pub fn isotropic(h: f64) -> Result<Self> {
        check_positive("bandwidth h", h)?;
        Ok(KernelSpec::IsotropicGaussian { h })
    }

    pub fn mahalanobis(h: f64, metric: DMatrix<f64>) -> Result<Self> {
        check_positive("bandwidth h", h)?;
        check_spd(&metric)?;
        Ok(KernelSpec::Mahalanobis { h, metric })
    }

    /// Mahalanobis kernel for a rank-deficient metric `M = L^T L + eps I`.
    pub fn low_rank(h: f64, l: &DMatrix<f64>) -> Result<Self> {
        let d = l.ncols();
        let metric = l.transpose() * l + DMatrix::<f64>::identity(d, d) * LOW_RANK_RIDGE;
        KernelSpec::mahalanobis(h, metric)
    }

    pub fn bilinear(a: DMatrix<f64>, scale: f64) -> Result<Self> {
        check_positive("logit scale", scale)?;
        if !a.is_square() {
            return Err(Error::DimError { expected: a.nrows(), got: a.ncols() });
        }
        Ok(KernelSpec::BilinearLogit { a, scale })
    }

    pub fn vmf(kappa: f64) -> Result<Self> {
        check_positive("concentration kappa", kappa)?;
        Ok(KernelSpec::Vmf { kappa })
    }

    fn expected_dim(&self) -> Option<usize> {
        match self {
            KernelSpec::Mahalanobis { metric, .. } => Some(metric.nrows()),
            KernelSpec::BilinearLogit { a, .. } => Some(a.nrows()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightVector {
    pub w: Vec<f64>,
    pub neff: f64,
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn quad_form(metric: &DMatrix<f64>, z: &[f64]) -> f64 {
    let d = z.len();
    let mut acc = 0.0;
    for k in 0..d {
        let col = metric.column(k);
        let mut inner = 0.0;
        for j in 0..d {
            inner += z[j] * col[j];
        }
        acc += inner * z[k];
    }
    acc
}

fn check_dims(x: &[f64], s: &SupportSet, k: &KernelSpec) -> Result<()> {
    if x.len() != s.d() {
        return Err(Error::DimError { expected: s.d(), got: x.len() });
    }
    if let Some(kd) = k.expected_dim() {
        if kd != s.d() {
            return Err(Error::DimError { expected: s.d(), got: kd });
        }
    }
    Ok(())
}

/// Raw kernel logits `l_i`, without normalization.
pub fn logits(x: &[f64], s: &SupportSet, k: &KernelSpec) -> Result<Vec<f64>> {
    let mut out = vec![0.0; s.m()];
    logits_into(x, s, k, &mut out)?;
    Ok(out)
}

pub fn logits_into(x: &[f64], s: &SupportSet, k: &KernelSpec, out: &mut [f64]) -> Result<()> {
    check_dims(x, s, k)?;
    match k {
        KernelSpec::IsotropicGaussian { h } => {
            let c = 1.0 / (2.0 * h * h);
            for (o, r) in out.iter_mut().zip(s.rows()) {
                *o = -sq_dist(x, r) * c;
            }
        }
        KernelSpec::Mahalanobis { h, metric } => {
            let c = 1.0 / (2.0 * h * h);
            let mut z = vec![0.0; x.len()];
            for (o, r) in out.iter_mut().zip(s.rows()) {
                for ((zj, xj), rj) in z.iter_mut().zip(x).zip(r) {
                    *zj = xj - rj;
                }
                *o = -quad_form(metric, &z) * c;
            }
        }
        KernelSpec::BilinearLogit { a, scale } => {
            // x^T A s_i = (A^T x) . s_i
            let d = x.len();
            let mut atx = vec![0.0; d];
            for (k, v) in atx.iter_mut().enumerate() {
                *v = (0..d).map(|j| a[(j, k)] * x[j]).sum();
            }
            for (o, r) in out.iter_mut().zip(s.rows()) {
                *o = dot(&atx, r) / scale;
            }
        }
        KernelSpec::Vmf { kappa } => {
            check_unit(x)?;
            for (o, r) in out.iter_mut().zip(s.rows()) {
                check_unit(r)?;
                *o = kappa * dot(x, r);
            }
        }
    }
    Ok(())
}

fn check_unit(v: &[f64]) -> Result<()> {
    let norm = dot(v, v).sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::NormError { norm });
    }
    Ok(())
}

/// Softmax in place with max-subtraction, returning `n_eff = 1 / sum w^2`.
///
/// If the maximum logit is not finite (every logit underflowed to `-inf`, or
/// some overflowed to `+inf`), the weights are uniform over the argmax set of
/// the raw logits.
pub fn softmax_in_place(l: &mut [f64]) -> f64 {
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_finite() {
        let mut sum = 0.0;
        for v in l.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        let mut sq = 0.0;
        for v in l.iter_mut() {
            *v *= inv;
            sq += *v * *v;
        }
        1.0 / sq
    } else {
        let ties = l.iter().filter(|&&v| v == max).count().max(1);
        let u = 1.0 / ties as f64;
        let all = ties == 0 || l.iter().all(|v| v.is_nan());
        for v in l.iter_mut() {
            *v = if all || *v == max { u } else { 0.0 };
        }
        ties as f64
    }
}

pub fn weights_from_logits(mut l: Vec<f64>) -> WeightVector {
    let neff = softmax_in_place(&mut l);
    WeightVector { w: l, neff }
}

/// Normalized NW weights and their effective sample size.
pub fn nw_weights(x: &[f64], s: &SupportSet, k: &KernelSpec) -> Result<WeightVector> {
    Ok(weights_from_logits(logits(x, s, k)?))
}

/// `sum_i w_i v_i` over the rows of `values` (or of `s` itself when absent).
pub fn local_mean(
    x: &[f64],
    s: &SupportSet,
    k: &KernelSpec,
    values: Option<&SupportSet>,
) -> Result<Vec<f64>> {
    let vals = values.unwrap_or(s);
    if vals.m() != s.m() {
        return Err(Error::DimError { expected: s.m(), got: vals.m() });
    }
    let wv = nw_weights(x, s, k)?;
    Ok(weighted_rows(&wv.w, vals))
}

/// `sum_i w_i r_i` for the rows `r_i` of `rows`.
pub fn weighted_rows(w: &[f64], rows: &SupportSet) -> Vec<f64> {
    let mut out = vec![0.0; rows.d()];
    for (wi, r) in w.iter().zip(rows.rows()) {
        if *wi == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(r) {
            *o += wi * v;
        }
    }
    out
}

fn log_sum_exp(l: &[f64]) -> f64 {
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log((1/m) sum_i phi_h(x~ - s_i))`, evaluated by log-sum-exp.
pub fn kde_descaled_log_density(x_tilde: &[f64], s: &SupportSet, h: f64) -> Result<f64> {
    check_positive("bandwidth h", h)?;
    let l = logits(x_tilde, s, &KernelSpec::IsotropicGaussian { h })?;
    let d = s.d() as f64;
    Ok(log_sum_exp(&l) - (s.m() as f64).ln() - 0.5 * d * (LN_2PI + 2.0 * h.ln()))
}

/// De-scaled KDE `(1/m) sum_i phi_h(x~ - s_i)`.
pub fn kde_descaled_density(x_tilde: &[f64], s: &SupportSet, h: f64) -> Result<f64> {
    Ok(kde_descaled_log_density(x_tilde, s, h)?.exp())
}

/// Score of the de-scaled KDE: `(m_h(x~) - x~) / h^2`.
pub fn kde_descaled_score(x_tilde: &[f64], s: &SupportSet, h: f64) -> Result<Vec<f64>> {
    let k = KernelSpec::isotropic(h)?;
    let m = local_mean(x_tilde, s, &k, None)?;
    let inv = 1.0 / (h * h);
    Ok(m.iter().zip(x_tilde).map(|(mi, xi)| (mi - xi) * inv).collect())
}

/// Log of the un-scaled path marginal `p_t(x) = (1/m) sum_i N(x; t s_i, sigma^2 I)`.
pub fn mixture_log_density(x: &[f64], s: &SupportSet, t: f64, sigma: f64) -> Result<f64> {
    check_positive("sigma", sigma)?;
    if x.len() != s.d() {
        return Err(Error::DimError { expected: s.d(), got: x.len() });
    }
    let c = 1.0 / (2.0 * sigma * sigma);
    let l: Vec<f64> = s
        .rows()
        .map(|r| -r.iter().zip(x).map(|(si, xi)| (xi - t * si).powi(2)).sum::<f64>() * c)
        .collect();
    let d = s.d() as f64;
    Ok(log_sum_exp(&l) - (s.m() as f64).ln() - 0.5 * d * (LN_2PI + 2.0 * sigma.ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s1(points: &[f64]) -> SupportSet {
        SupportSet::new(points.to_vec(), points.len(), 1).unwrap()
    }

    // Independent scalar oracle for a two-point softmax.
    fn two_point_weights(l0: f64, l1: f64) -> (f64, f64) {
        let e0 = l0.exp();
        let e1 = l1.exp();
        (e0 / (e0 + e1), e1 / (e0 + e1))
    }

    #[test]
    fn logits_examples() {
        let s = s1(&[0.0, 2.0]);
        let k = KernelSpec::isotropic(1.0).unwrap();
        assert_eq!(logits(&[0.0], &s, &k).unwrap(), vec![0.0, -2.0]);
        assert_eq!(logits(&[2.0], &s, &k).unwrap()[1], 0.0);
        assert!(matches!(logits(&[0.0, 1.0], &s, &k), Err(Error::DimError { .. })));
    }

    #[test]
    fn nw_weights_two_point_oracle() {
        let s = s1(&[0.0, 2.0]);
        let k = KernelSpec::isotropic(1.0).unwrap();
        let wv = nw_weights(&[0.0], &s, &k).unwrap();
        let (a, b) = two_point_weights(0.0, -2.0);
        assert!((wv.w[0] - a).abs() < 1e-15 && (wv.w[1] - b).abs() < 1e-15);
        // frozen from a 50-digit evaluation
        assert!((wv.w[0] - 0.880_797_077_977_882_4).abs() < 1e-15);
        assert!((wv.neff - 1.265_802_228_834_079_7).abs() < 1e-12);
        let m = local_mean(&[0.0], &s, &k, None).unwrap();
        assert!((m[0] - 0.238_405_844_044_235_1).abs() < 1e-15);
    }

    #[test]
    fn single_point_and_symmetric_weights() {
        let s = s1(&[3.5]);
        for k in [KernelSpec::isotropic(0.1).unwrap(), KernelSpec::isotropic(10.0).unwrap()] {
            let wv = nw_weights(&[-4.0], &s, &k).unwrap();
            assert_eq!(wv.w, vec![1.0]);
            assert_eq!(wv.neff, 1.0);
            assert_eq!(local_mean(&[-4.0], &s, &k, None).unwrap(), vec![3.5]);
        }
        let s = s1(&[-1.0, 1.0]);
        let wv = nw_weights(&[0.0], &s, &KernelSpec::isotropic(0.3).unwrap()).unwrap();
        assert_eq!(wv.w, vec![0.5, 0.5]);
        assert_eq!(wv.neff, 2.0);
    }

    #[test]
    fn underflow_falls_back_to_argmax_ties() {
        let mut l = vec![f64::NEG_INFINITY; 3];
        let neff = softmax_in_place(&mut l);
        assert_eq!(l, vec![1.0 / 3.0; 3]);
        assert_eq!(neff, 3.0);
        let mut l = vec![1.0, f64::INFINITY, f64::INFINITY];
        assert_eq!(softmax_in_place(&mut l), 2.0);
        assert_eq!(l, vec![0.0, 0.5, 0.5]);
        // extreme bandwidth with a distance tie: no NaN
        let s = s1(&[-1.0, 1.0, 5.0]);
        let wv = nw_weights(&[0.0], &s, &KernelSpec::isotropic(1e-200).unwrap()).unwrap();
        assert!(wv.w.iter().all(|w| w.is_finite()));
        assert!((wv.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn large_bandwidth_gives_arithmetic_mean() {
        let s = SupportSet::new(vec![0.0, 1.0, 3.0, -2.0, 5.0, 4.0], 3, 2).unwrap();
        let k = KernelSpec::isotropic(1e6).unwrap();
        let m = local_mean(&[0.3, -0.7], &s, &k, None).unwrap();
        let mean = s.mean();
        assert!((m[0] - mean[0]).abs() < 1e-6 && (m[1] - mean[1]).abs() < 1e-6);
    }

    #[test]
    fn generalized_values() {
        let s = s1(&[0.0, 2.0]);
        let vals = SupportSet::new(vec![1.0, 10.0, 3.0, 30.0], 2, 2).unwrap();
        let k = KernelSpec::isotropic(1.0).unwrap();
        let out = local_mean(&[0.0], &s, &k, Some(&vals)).unwrap();
        let (a, b) = two_point_weights(0.0, -2.0);
        assert!((out[0] - (a + 3.0 * b)).abs() < 1e-14);
        assert!((out[1] - (10.0 * a + 30.0 * b)).abs() < 1e-13);
        let bad = s1(&[1.0, 2.0, 3.0]);
        assert!(local_mean(&[0.0], &s, &k, Some(&bad)).is_err());
    }

    #[test]
    fn density_examples() {
        let s = s1(&[0.7]);
        let p = kde_descaled_density(&[0.7], &s, 1.0).unwrap();
        assert!((p - 0.398_942_280_401_432_7).abs() < 1e-15);
        let s = s1(&[-1.0, 1.0]);
        let p = kde_descaled_density(&[0.0], &s, 1.0).unwrap();
        let oracle = (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((p - oracle).abs() < 1e-15);
        assert!((p - 0.241_970_724_519_143_37).abs() < 1e-15);
    }

    #[test]
    fn density_integrates_to_one_in_1d() {
        let s = s1(&[-1.3, 0.2, 0.25, 2.0]);
        let h = 0.4;
        // trapezoid on [-8, 8]
        let n = 16_000;
        let dx = 16.0 / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let x = -8.0 + i as f64 * dx;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            acc += w * kde_descaled_density(&[x], &s, h).unwrap();
        }
        assert!((acc * dx - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mixture_form_matches_kde_form() {
        let s = SupportSet::new(vec![0.1, -0.4, 1.2, 0.3, -0.8, 2.0], 3, 2).unwrap();
        let sigma_min: f64 = 0.01;
        for &t in &[0.05, 0.3, 0.77, 1.0] {
            let sigma = 1.0 - (1.0 - sigma_min) * t;
            let h = sigma / t;
            let xt = [0.3, -0.2];
            let x = [t * xt[0], t * xt[1]];
            let lhs = 2.0 * f64::ln(t) + mixture_log_density(&x, &s, t, sigma).unwrap();
            let rhs = kde_descaled_log_density(&xt, &s, h).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0), "t={t}");
        }
    }

    #[test]
    fn score_examples() {
        let s = s1(&[1.5]);
        assert_eq!(kde_descaled_score(&[1.5], &s, 0.2).unwrap(), vec![0.0]);
        let s = s1(&[0.0, 2.0]);
        let sc = kde_descaled_score(&[0.0], &s, 1.0).unwrap();
        assert!((sc[0] - 0.238_405_844_044_235_1).abs() < 1e-15);
    }

    #[test]
    fn score_matches_finite_differences() {
        let s = SupportSet::new(vec![0.0, 0.0, 1.0, 0.5, -0.5, 1.5, 0.2, -1.0], 4, 2).unwrap();
        let h = 0.8;
        let x = [0.3, 0.1];
        let sc = kde_descaled_score(&x, &s, h).unwrap();
        let step = 1e-5;
        for j in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += step;
            xm[j] -= step;
            let fd = (kde_descaled_log_density(&xp, &s, h).unwrap()
                - kde_descaled_log_density(&xm, &s, h).unwrap())
                / (2.0 * step);
            assert!((fd - sc[j]).abs() <= 1e-5 * sc[j].abs().max(1e-3));
        }
    }

    #[test]
    fn mahalanobis_identity_matches_isotropic() {
        let s = SupportSet::new(vec![0.0, 0.0, 1.0, 0.5, -0.5, 1.5], 3, 2).unwrap();
        let iso = KernelSpec::isotropic(0.7).unwrap();
        let mah = KernelSpec::mahalanobis(0.7, DMatrix::identity(2, 2)).unwrap();
        let a = nw_weights(&[0.2, 0.4], &s, &iso).unwrap();
        let b = nw_weights(&[0.2, 0.4], &s, &mah).unwrap();
        for (x, y) in a.w.iter().zip(&b.w) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mahalanobis_direct_quadratic_form() {
        let s = SupportSet::new(vec![0.0, 0.0, 1.0, 0.0, -2.0, 0.0], 3, 2).unwrap();
        let metric = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let h = 1.3;
        let k = KernelSpec::mahalanobis(h, metric).unwrap();
        let x = [0.4, -0.9];
        let l = logits(&x, &s, &k).unwrap();
        for (i, li) in l.iter().enumerate() {
            let dx = x[0] - s.row(i)[0];
            let dy = x[1] - s.row(i)[1];
            let oracle = -(4.0 * dx * dx + dy * dy) / (2.0 * h * h);
            assert!((li - oracle).abs() < 1e-14);
        }
    }

    #[test]
    fn metric_validation() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(KernelSpec::mahalanobis(1.0, asym), Err(Error::NotPositiveDefinite)));
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(KernelSpec::mahalanobis(1.0, indef), Err(Error::NotPositiveDefinite)));
        assert!(KernelSpec::isotropic(0.0).is_err());
        assert!(KernelSpec::vmf(-1.0).is_err());
        assert!(KernelSpec::bilinear(DMatrix::zeros(2, 2), 0.0).is_err());
        // rank-one L still yields a valid kernel through the ridge
        let l = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, -1.0]);
        assert!(KernelSpec::low_rank(1.0, &l).is_ok());
    }

    #[test]
    fn vmf_requires_unit_inputs() {
        let s = SupportSet::new(vec![1.0, 0.0, 0.0, 1.0], 2, 2).unwrap();
        let k = KernelSpec::vmf(2.0).unwrap();
        let l = logits(&[1.0, 0.0], &s, &k).unwrap();
        assert_eq!(l, vec![2.0, 0.0]);
        assert!(matches!(logits(&[2.0, 0.0], &s, &k), Err(Error::NormError { .. })));
        let bad = SupportSet::new(vec![1.0, 1.0], 1, 2).unwrap();
        assert!(matches!(logits(&[1.0, 0.0], &bad, &k), Err(Error::NormError { .. })));
    }

    #[test]
    fn support_validation() {
        assert!(SupportSet::new(vec![], 0, 1).is_err());
        assert!(SupportSet::new(vec![1.0, f64::NAN], 1, 2).is_err());
        assert!(SupportSet::new(vec![1.0, 2.0, 3.0], 2, 2).is_err());
        assert!(SupportSet::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    fn support_strategy() -> impl Strategy<Value = (SupportSet, Vec<f64>)> {
        (1usize..4, 1usize..12).prop_flat_map(|(d, m)| {
            (
                proptest::collection::vec(-5.0f64..5.0, m * d),
                proptest::collection::vec(-5.0f64..5.0, d),
            )
                .prop_map(move |(data, x)| (SupportSet::new(data, m, d).unwrap(), x))
        })
    }

    proptest! {
        #[test]
        fn weights_on_simplex((s, x) in support_strategy(), h in 1e-3f64..50.0) {
            let wv = nw_weights(&x, &s, &KernelSpec::isotropic(h).unwrap()).unwrap();
            prop_assert!(wv.w.iter().all(|&w| w >= 0.0));
            prop_assert!((wv.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(wv.neff >= 1.0 - 1e-12 && wv.neff <= s.m() as f64 + 1e-9);
        }

        #[test]
        fn shift_equivariance((s, x) in support_strategy(), h in 0.1f64..10.0, c in -100.0f64..100.0) {
            let k = KernelSpec::isotropic(h).unwrap();
            let a = nw_weights(&x, &s, &k).unwrap();
            let shifted = s.map_rows(s.d(), |r, o| for (oi, ri) in o.iter_mut().zip(r) { *oi = ri + c }).unwrap();
            let xs: Vec<f64> = x.iter().map(|v| v + c).collect();
            let b = nw_weights(&xs, &shifted, &k).unwrap();
            for (u, v) in a.w.iter().zip(&b.w) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }

        #[test]
        fn logit_offset_invariance(l in proptest::collection::vec(-30.0f64..30.0, 1..16), c in -500.0f64..500.0) {
            let a = weights_from_logits(l.clone());
            let b = weights_from_logits(l.iter().map(|v| v + c).collect());
            for (u, v) in a.w.iter().zip(&b.w) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }

        #[test]
        fn neff_tends_to_one_for_unique_neighbour((s, x) in support_strategy()) {
            let l = logits(&x, &s, &KernelSpec::isotropic(1.0).unwrap()).unwrap();
            let mut sorted = l.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            prop_assume!(sorted.len() == 1 || sorted[0] - sorted[1] > 1e-6);
            let wv = nw_weights(&x, &s, &KernelSpec::isotropic(1e-4).unwrap()).unwrap();
            prop_assert!((wv.neff - 1.0).abs() < 1e-6);
        }
    }
}
