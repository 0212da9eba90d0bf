//! Exact support-conditioned flow matching under the Gaussian optimal-transport
//! path, expressed as a Nadaraya-Watson kernel smoother.
//!
//! The plug-in velocity field for a finite support set `S` is
//!
//! ```text
//! u_t(x) = x~ + (m_h(x~; S) - x~) / sigma_t,   x~ = x / t,   h = sigma_t / t
//! ```
//!
//! where `m_h` is the Gaussian-kernel NW local mean. The crate provides that
//! field, its cross-attention realizations, ODE sample generation, and the
//! diagnostics built on top of them (kernel collapse, whitening, variance
//! scaling, endpoint checks).
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiments;
pub mod format;
pub mod kernels;
pub mod metrics;
pub mod ode;
pub mod report;
pub mod rng;
pub mod schedule;
pub mod tasks;
pub mod velocity;

pub use error::{Error, Result};
pub use kernels::{KernelSpec, SupportSet, WeightVector};
pub use ode::{BaseLaw, IntegratorConfig, Method, SampleBatch};
pub use schedule::{FlowTime, PathSchedule};
pub use velocity::{AnisotropicField, MultiHeadParams, PluginField, VelocityField};

#[doc(hidden)]
pub use serde_json as __serde_json;

/// Library version recorded in every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
