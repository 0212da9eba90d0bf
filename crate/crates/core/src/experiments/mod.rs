//! Experiment procedures. Each takes a fully explicit config (echoed into the
//! report) and is a pure function of it.

use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::kernels::SupportSet;
use crate::metrics;
use crate::report::RunReport;
use crate::rng::{self, purpose};
use crate::tasks::{self, Task, TaskSpec};

mod exactness;
mod generation;
mod neff;
mod rates;

pub use exactness::{exp_kde_identity, exp_realization_fuzz, KdeIdentityConfig, RealizationFuzzConfig};
pub use generation::{
    exp_anisotropic_shells, exp_endpoint_check, exp_solver_control, AnisotropicShellsConfig, EndpointCheckConfig,
    SolverControlConfig,
};
pub use neff::{exp_neff_collapse, exp_whitening_control, GmmShape, NeffCollapseConfig, SyntheticFeatures, WhiteningControlConfig};
pub use rates::{exp_sphere_rate, exp_variance_scaling, SphereRateConfig, VarianceFamily, VarianceScalingConfig};

pub const NAMES: [&str; 9] = [
    "realization-fuzz",
    "kde-identity",
    "neff-collapse",
    "variance-scaling",
    "endpoint-check",
    "solver-control",
    "sphere-rate",
    "whitening-control",
    "anisotropic-shells",
];

pub(crate) fn seed_range(n: u64) -> Vec<u64> {
    (0..n).collect()
}

pub(crate) fn gmm2d() -> TaskSpec {
    TaskSpec::gmm(2, 0)
}

pub(crate) fn support_only(task: &Task, m: usize, seed: u64) -> Result<SupportSet> {
    tasks::draw_support(task, m, seed)
}

/// Median-heuristic MMD bandwidth from a fixed pilot draw of the task, so
/// every seed uses the same kernel. Falls back to 1 on a degenerate pilot.
pub(crate) fn family_bandwidth(task: &Task) -> Result<f64> {
    let pilot = task.sample(1000, rng::child_seed(0, purpose::REFERENCE, 77))?;
    let half = pilot.m() / 2;
    let (a, b) = pilot.as_slice().split_at(half * pilot.d());
    let a = SupportSet::new(a.to_vec(), half, pilot.d())?;
    let b = SupportSet::new(b.to_vec(), pilot.m() - half, pilot.d())?;
    match metrics::median_heuristic(&a, &b) {
        Ok(h) => Ok(h),
        Err(Error::DegenerateScale) => Ok(1.0),
        Err(e) => Err(e),
    }
}

pub fn default_config(name: &str) -> Result<Value> {
    let v = match name {
        "realization-fuzz" => serde_json::to_value(RealizationFuzzConfig::default())?,
        "kde-identity" => serde_json::to_value(KdeIdentityConfig::default())?,
        "neff-collapse" => serde_json::to_value(NeffCollapseConfig::default())?,
        "variance-scaling" => serde_json::to_value(VarianceScalingConfig::default())?,
        "endpoint-check" => serde_json::to_value(EndpointCheckConfig::default())?,
        "solver-control" => serde_json::to_value(SolverControlConfig::default())?,
        "sphere-rate" => serde_json::to_value(SphereRateConfig::default())?,
        "whitening-control" => serde_json::to_value(WhiteningControlConfig::default())?,
        "anisotropic-shells" => serde_json::to_value(AnisotropicShellsConfig::default())?,
        other => return Err(Error::ConfigError(format!("unknown experiment {other:?}; expected one of {NAMES:?}"))),
    };
    Ok(v)
}

/// Overlays the top-level keys of `patch` onto `base`. Keys the base does not
/// have are rejected.
pub fn merge_config(base: &mut Value, patch: &Value) -> Result<()> {
    let (Value::Object(b), Value::Object(p)) = (base, patch) else {
        return Err(Error::ConfigError("experiment config must be a JSON object".into()));
    };
    for (k, v) in p {
        if !b.contains_key(k) {
            let known: Vec<&String> = b.keys().collect();
            return Err(Error::ConfigError(format!("unknown config key {k:?}; known keys: {known:?}")));
        }
        b.insert(k.clone(), v.clone());
    }
    Ok(())
}

fn parse<C: DeserializeOwned>(v: Value) -> Result<C> {
    serde_json::from_value(v).map_err(|e| Error::ConfigError(e.to_string()))
}

fn timed<C: Serialize>(cfg: C, f: impl FnOnce(C) -> Result<RunReport>) -> Result<RunReport> {
    let start = Instant::now();
    let mut rep = f(cfg)?;
    rep.wall_clock = start.elapsed();
    Ok(rep)
}

/// Runs experiment `name` with `patch` overlaid on its defaults.
pub fn run_experiment(name: &str, patch: &Value) -> Result<RunReport> {
    let mut cfg = default_config(name)?;
    merge_config(&mut cfg, patch)?;
    match name {
        "realization-fuzz" => timed(parse(cfg)?, |c| exp_realization_fuzz(&c)),
        "kde-identity" => timed(parse(cfg)?, |c| exp_kde_identity(&c)),
        "neff-collapse" => timed(parse(cfg)?, |c| exp_neff_collapse(&c)),
        "variance-scaling" => timed(parse(cfg)?, |c| exp_variance_scaling(&c)),
        "endpoint-check" => timed(parse(cfg)?, |c| exp_endpoint_check(&c)),
        "solver-control" => timed(parse(cfg)?, |c| exp_solver_control(&c)),
        "sphere-rate" => timed(parse(cfg)?, |c| exp_sphere_rate(&c)),
        "whitening-control" => timed(parse(cfg)?, |c| exp_whitening_control(&c)),
        "anisotropic-shells" => timed(parse(cfg)?, |c| exp_anisotropic_shells(&c)),
        _ => unreachable!("default_config validated the name"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_round_trip() {
        for name in NAMES {
            let v = default_config(name).unwrap();
            let mut merged = v.clone();
            merge_config(&mut merged, &json!({})).unwrap();
            assert_eq!(v, merged);
        }
        assert!(default_config("nope").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = default_config("realization-fuzz").unwrap();
        assert!(matches!(merge_config(&mut v, &json!({"m_typo": 3})), Err(Error::ConfigError(_))));
        assert!(run_experiment("realization-fuzz", &json!({"n_configs": "many"})).is_err());
    }
}
