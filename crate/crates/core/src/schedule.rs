//! Flow time and the OT noise schedule `sigma_t = 1 - (1 - sigma_min) t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A flow time in `[0, 1]`, validated once at construction.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
pub struct FlowTime(f64);

impl FlowTime {
    pub const ZERO: FlowTime = FlowTime(0.0);
    pub const ONE: FlowTime = FlowTime(1.0);

    pub fn new(t: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&t) {
            Ok(FlowTime(t))
        } else {
            Err(Error::InvalidParameter(format!("flow time {t} outside [0, 1]")))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl<'de> Deserialize<'de> for FlowTime {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let t = f64::deserialize(d)?;
        FlowTime::new(t).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathSchedule {
    sigma_min: f64,
}

impl PathSchedule {
    pub fn new(sigma_min: f64) -> Result<Self> {
        if sigma_min > 0.0 && sigma_min <= 1.0 {
            Ok(PathSchedule { sigma_min })
        } else {
            Err(Error::InvalidParameter(format!(
                "sigma_min {sigma_min} outside (0, 1]"
            )))
        }
    }

    #[inline]
    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    /// `sigma_t = 1 - (1 - sigma_min) t`.
    #[inline]
    pub fn sigma_at(&self, t: FlowTime) -> f64 {
        1.0 - (1.0 - self.sigma_min) * t.0
    }

    /// De-scaled bandwidth `h(t) = sigma_t / t`. Diverges at `t = 0`.
    pub fn bandwidth_at(&self, t: FlowTime) -> Result<f64> {
        if t.0 == 0.0 {
            return Err(Error::DivergentBandwidth);
        }
        Ok(self.sigma_at(t) / t.0)
    }
}

impl Default for PathSchedule {
    fn default() -> Self {
        PathSchedule { sigma_min: 0.01 }
    }
}

impl<'de> Deserialize<'de> for PathSchedule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            sigma_min: f64,
        }
        let raw = Raw::deserialize(d)?;
        PathSchedule::new(raw.sigma_min).map_err(serde::de::Error::custom)
    }
}
