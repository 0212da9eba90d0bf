//! ODE integration and sample generation.
//!
//! Integration starts at `t = 0` exactly; fields are expected to serve their
//! closed-form `t = 0` limit. Sample `i` of a batch draws its base noise from
//! stream `(seed, BASE_NOISE, i)`, so batches are bit-identical for any worker
//! count.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::SupportSet;
use crate::rng::{self, purpose};
use crate::schedule::FlowTime;
use crate::velocity::VelocityField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Euler { n_steps: usize },
    AdaptiveRk45 { rtol: f64, atol: f64, max_steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    #[serde(flatten)]
    pub method: Method,
    pub t_start: FlowTime,
    pub t_end: FlowTime,
}

pub const DEFAULT_EULER_STEPS: usize = 100;
pub const DEFAULT_RTOL: f64 = 1e-5;
pub const DEFAULT_ATOL: f64 = 1e-7;
pub const DEFAULT_MAX_STEPS: usize = 100_000;

impl IntegratorConfig {
    pub fn euler(n_steps: usize) -> Self {
        IntegratorConfig { method: Method::Euler { n_steps }, t_start: FlowTime::ZERO, t_end: FlowTime::ONE }
    }

    pub fn rk45(rtol: f64, atol: f64) -> Self {
        IntegratorConfig {
            method: Method::AdaptiveRk45 { rtol, atol, max_steps: DEFAULT_MAX_STEPS },
            t_start: FlowTime::ZERO,
            t_end: FlowTime::ONE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_start >= self.t_end {
            return Err(Error::ConfigError("t_start must be < t_end".into()));
        }
        match self.method {
            Method::Euler { n_steps: 0 } => Err(Error::ConfigError("Euler needs n_steps >= 1".into())),
            Method::AdaptiveRk45 { rtol, atol, max_steps } => {
                if !(rtol > 0.0 && atol > 0.0) {
                    Err(Error::ConfigError("rtol and atol must be positive".into()))
                } else if max_steps == 0 {
                    Err(Error::ConfigError("max_steps must be >= 1".into()))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self.method {
            Method::Euler { n_steps } => format!("euler-{n_steps}"),
            Method::AdaptiveRk45 { rtol, atol, .. } => format!("rk45(rtol={rtol:e},atol={atol:e})"),
        }
    }
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig::euler(DEFAULT_EULER_STEPS)
    }
}

fn time(t: f64) -> FlowTime {
    // grid points are computed inside [t_start, t_end]; clamp absorbs roundoff
    FlowTime::new(t.clamp(0.0, 1.0)).expect("clamped time is valid")
}

fn check_finite(x: &[f64], t: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalBlowup { t })
    }
}

/// Integrates `dx/dt = v(x, t)` from `cfg.t_start` to `cfg.t_end`.
pub fn integrate<F: VelocityField + ?Sized>(field: &F, x0: &[f64], cfg: &IntegratorConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if x0.len() != field.dim() {
        return Err(Error::DimError { expected: field.dim(), got: x0.len() });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InputError("non-finite initial state".into()));
    }
    match cfg.method {
        Method::Euler { n_steps } => euler(field, x0, cfg.t_start.get(), cfg.t_end.get(), n_steps),
        Method::AdaptiveRk45 { rtol, atol, max_steps } => {
            dopri5(field, x0, cfg.t_start.get(), cfg.t_end.get(), rtol, atol, max_steps)
        }
    }
}

fn euler<F: VelocityField + ?Sized>(field: &F, x0: &[f64], t0: f64, t1: f64, n: usize) -> Result<Vec<f64>> {
    let h = (t1 - t0) / n as f64;
    let mut x = x0.to_vec();
    let mut v = vec![0.0; x.len()];
    for k in 0..n {
        let t = t0 + k as f64 * h;
        field.eval_into(&x, time(t), &mut v)?;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += h * vi;
        }
        check_finite(&x, t + h)?;
    }
    Ok(x)
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// 5th-order weights equal the last row of A (FSAL); E = b5 - b4.
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

fn error_norm(err: &[f64], x: &[f64], x_new: &[f64], rtol: f64, atol: f64) -> f64 {
    let n = err.len() as f64;
    let s: f64 = err
        .iter()
        .zip(x.iter().zip(x_new))
        .map(|(e, (a, b))| {
            let sc = atol + rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (s / n).sqrt()
}

fn initial_step<F: VelocityField + ?Sized>(
    field: &F,
    x0: &[f64],
    f0: &[f64],
    t0: f64,
    span: f64,
    rtol: f64,
    atol: f64,
) -> Result<f64> {
    let n = x0.len() as f64;
    let scale: Vec<f64> = x0.iter().map(|v| atol + rtol * v.abs()).collect();
    let d0 = (x0.iter().zip(&scale).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / n).sqrt();
    let d1 = (f0.iter().zip(&scale).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / n).sqrt();
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let x1: Vec<f64> = x0.iter().zip(f0).map(|(x, f)| x + h0 * f).collect();
    let f1 = field.eval(&x1, time(t0 + h0))?;
    let d2 = (f1.iter().zip(f0).zip(&scale).map(|((a, b), s)| ((a - b) / s).powi(2)).sum::<f64>() / n).sqrt() / h0;
    let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
    Ok((100.0 * h0).min(h1).min(span))
}

fn dopri5<F: VelocityField + ?Sized>(
    field: &F,
    x0: &[f64],
    t0: f64,
    t1: f64,
    rtol: f64,
    atol: f64,
    max_steps: usize,
) -> Result<Vec<f64>> {
    let dim = x0.len();
    let mut x = x0.to_vec();
    let mut t = t0;
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; dim]; 7];
    field.eval_into(&x, time(t), &mut k[0])?;
    let mut h = initial_step(field, &x, &k[0], t, t1 - t0, rtol, atol)?;
    let mut stage = vec![0.0; dim];
    let mut x_new = vec![0.0; dim];
    let mut err = vec![0.0; dim];
    let mut steps = 0usize;

    while t < t1 {
        if steps >= max_steps {
            return Err(Error::StepLimit { max_steps });
        }
        steps += 1;
        let last = t + h >= t1;
        if last {
            h = t1 - t;
        }
        for s in 1..7 {
            for i in 0..dim {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += A[s][j] * kj[i];
                }
                stage[i] = x[i] + h * acc;
            }
            let ts = if s >= 5 && last { t1 } else { t + C[s] * h };
            let (head, tail) = k.split_at_mut(s);
            let _ = head;
            field.eval_into(&stage, time(ts), &mut tail[0])?;
        }
        // stage 6 was evaluated at the 5th-order solution (row 6 of A equals B5)
        for i in 0..dim {
            let mut acc = 0.0;
            let mut e = 0.0;
            for j in 0..7 {
                acc += B5[j] * k[j][i];
                e += E[j] * k[j][i];
            }
            x_new[i] = x[i] + h * acc;
            err[i] = h * e;
        }
        check_finite(&x_new, t + h)?;
        let en = error_norm(&err, &x, &x_new, rtol, atol);
        if en <= 1.0 {
            t = if last { t1 } else { t + h };
            x.copy_from_slice(&x_new);
            let k6 = k[6].clone();
            k[0].copy_from_slice(&k6);
            let factor = if en == 0.0 { MAX_FACTOR } else { (SAFETY * en.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR) };
            h *= factor;
        } else {
            let factor = (SAFETY * en.powf(-0.2)).clamp(MIN_FACTOR, 1.0);
            h *= factor;
            if !h.is_finite() || h <= f64::EPSILON * t1.abs().max(1.0) {
                return Err(Error::NumericalBlowup { t });
            }
        }
    }
    Ok(x)
}

/// Law of the base noise `X_0`.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseLaw {
    /// `N(0, I)`
    Isotropic,
    /// `N(0, M^{-1})` for a precision matrix `M`.
    Precision(DMatrix<f64>),
}

impl BaseLaw {
    pub fn label(&self) -> &'static str {
        match self {
            BaseLaw::Isotropic => "isotropic",
            BaseLaw::Precision(_) => "precision",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub sigma_min: Option<f64>,
    pub integrator: IntegratorConfig,
    pub base: String,
    pub support_hash: Option<String>,
    pub rng: String,
    pub stream_purpose: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub samples: SupportSet,
    pub seed: u64,
    pub meta: GenerationMeta,
}

/// FNV-1a over the bit patterns of a table, with its shape.
pub fn support_hash(s: &SupportSet) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(&(s.m() as u64).to_le_bytes());
    eat(&(s.d() as u64).to_le_bytes());
    for v in s.as_slice() {
        eat(&v.to_bits().to_le_bytes());
    }
    format!("{h:016x}")
}

fn metrics_match(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(1.0))
}

/// Draws `n` base samples and integrates each to `cfg.t_end`.
pub fn generate<F: VelocityField + ?Sized>(
    field: &F,
    n: usize,
    seed: u64,
    cfg: &IntegratorConfig,
    base: &BaseLaw,
) -> Result<SampleBatch> {
    generate_with_meta(field, n, seed, cfg, base, None, None)
}

pub fn generate_with_meta<F: VelocityField + ?Sized>(
    field: &F,
    n: usize,
    seed: u64,
    cfg: &IntegratorConfig,
    base: &BaseLaw,
    sigma_min: Option<f64>,
    support: Option<&SupportSet>,
) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::ConfigError("n must be >= 1".into()));
    }
    cfg.validate()?;
    let d = field.dim();
    let noise_map: Option<DMatrix<f64>> = match (base, field.base_precision()) {
        (BaseLaw::Isotropic, None) => None,
        (BaseLaw::Precision(m), Some(fm)) if metrics_match(m, fm) => {
            // M = L L^T; x = L^{-T} z has covariance M^{-1}
            let chol = m.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
            let lt = chol.l().transpose();
            let inv = lt.try_inverse().ok_or(Error::NotPositiveDefinite)?;
            Some(inv)
        }
        (BaseLaw::Precision(_), Some(_)) => {
            return Err(Error::ConfigError("precision base does not match the field metric".into()))
        }
        (BaseLaw::Precision(_), None) => {
            return Err(Error::ConfigError("precision base requires an anisotropic field".into()))
        }
        (BaseLaw::Isotropic, Some(_)) => {
            return Err(Error::ConfigError("anisotropic field requires a matching precision base".into()))
        }
    };
    if let Some(m) = &noise_map {
        if m.nrows() != d {
            return Err(Error::DimError { expected: d, got: m.nrows() });
        }
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, purpose::BASE_NOISE, i as u64);
            let z: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
            let x0 = match &noise_map {
                None => z,
                Some(m) => (m * DVector::from_vec(z)).as_slice().to_vec(),
            };
            integrate(field, &x0, cfg)
        })
        .collect::<Result<_>>()?;
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(SampleBatch {
        samples: SupportSet::new(data, n, d)?,
        seed,
        meta: GenerationMeta {
            sigma_min,
            integrator: *cfg,
            base: base.label().to_string(),
            support_hash: support.map(support_hash),
            rng: rng::RNG_NAME.to_string(),
            stream_purpose: purpose::BASE_NOISE,
        },
    })
}

/// Direct draws from the Gaussian KDE of `s` at `bandwidth`: a uniformly chosen
/// row plus `bandwidth * N(0, I)`.
pub fn kde_direct_sample(s: &SupportSet, bandwidth: f64, n: usize, seed: u64) -> Result<SampleBatch> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if n == 0 {
        return Err(Error::ConfigError("n must be >= 1".into()));
    }
    let d = s.d();
    let mut data = vec![0.0; n * d];
    data.par_chunks_exact_mut(d).enumerate().for_each(|(i, row)| {
        let mut r = rng::stream(seed, purpose::KDE_DRAW, i as u64);
        let j = r.random_range(0..s.m());
        for (o, c) in row.iter_mut().zip(s.row(j)) {
            *o = c + bandwidth * r.sample::<f64, _>(StandardNormal);
        }
    });
    Ok(SampleBatch {
        samples: SupportSet::new(data, n, d)?,
        seed,
        meta: GenerationMeta {
            sigma_min: None,
            integrator: IntegratorConfig::default(),
            base: format!("kde-direct(bandwidth={bandwidth:e})"),
            support_hash: Some(support_hash(s)),
            rng: rng::RNG_NAME.to_string(),
            stream_purpose: purpose::KDE_DRAW,
        },
    })
}
