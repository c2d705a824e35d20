//! Per-area stochastic delay laws.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::NetsimError;
use crate::addressing::AreaKind;

/// Outcome of one delay draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DelaySample {
    /// Finite one-way delay in milliseconds.
    Finite(f64),
    /// Infinite delay: the link is broken for this packet.
    Broken,
}

/// Delay law of one QoS area.
///
/// * Dedicated: `base + scale * X`, `X ~ Exp(rate)`.
/// * Shared links: `Normal(mean, sd)`, clamped at zero.
/// * High impairment: broken with probability `p_break`, otherwise
///   `Uniform[min, max]`. This stands in for a uniform law on
///   `[min, inf]` whose infinite tail means a broken link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelayModel {
    Dedicated { base_ms: f64, scale_ms: f64, rate: f64 },
    Shared { mean_ms: f64, sd_ms: f64 },
    HighImpairment { min_ms: f64, max_ms: f64, p_break: f64 },
}

impl DelayModel {
    pub const DEDICATED: DelayModel = DelayModel::Dedicated { base_ms: 10.0, scale_ms: 50.0, rate: 1.0 };
    pub const SHARED: DelayModel = DelayModel::Shared { mean_ms: 250.0, sd_ms: 20.0 };
    pub const HIGH_IMPAIRMENT: DelayModel = DelayModel::HighImpairment { min_ms: 100.0, max_ms: 2000.0, p_break: 0.05 };

    pub fn default_for(kind: AreaKind) -> DelayModel {
        match kind {
            AreaKind::Dedicated => Self::DEDICATED,
            AreaKind::SharedLinks => Self::SHARED,
            AreaKind::HighImpairment => Self::HIGH_IMPAIRMENT,
        }
    }

    pub fn kind(&self) -> AreaKind {
        match self {
            DelayModel::Dedicated { .. } => AreaKind::Dedicated,
            DelayModel::Shared { .. } => AreaKind::SharedLinks,
            DelayModel::HighImpairment { .. } => AreaKind::HighImpairment,
        }
    }

    pub fn validate(&self) -> Result<(), NetsimError> {
        let bad = |what: &str| Err(NetsimError::InvalidDelayModel(format!("{}: {what}", self.kind())));
        let pos = |v: f64| v.is_finite() && v > 0.0;
        match *self {
            DelayModel::Dedicated { base_ms, scale_ms, rate } => {
                if !pos(base_ms) || !pos(scale_ms) {
                    return bad("base_ms and scale_ms must be > 0");
                }
                if !pos(rate) {
                    return bad("rate must be > 0");
                }
            }
            DelayModel::Shared { mean_ms, sd_ms } => {
                if !pos(mean_ms) || !pos(sd_ms) {
                    return bad("mean_ms and sd_ms must be > 0");
                }
            }
            DelayModel::HighImpairment { min_ms, max_ms, p_break } => {
                if !pos(min_ms) || !pos(max_ms) || max_ms < min_ms {
                    return bad("need 0 < min_ms <= max_ms");
                }
                if !(0.0..=1.0).contains(&p_break) {
                    return bad("p_break must be within [0, 1]");
                }
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DelaySample {
        match *self {
            DelayModel::Dedicated { base_ms, scale_ms, rate } => {
                let u: f64 = rng.random();
                let x = -(1.0 - u).ln() / rate;
                DelaySample::Finite(base_ms + scale_ms * x)
            }
            DelayModel::Shared { mean_ms, sd_ms } => {
                let normal = Normal::new(mean_ms, sd_ms).expect("validated sd");
                DelaySample::Finite(normal.sample(rng).max(0.0))
            }
            DelayModel::HighImpairment { min_ms, max_ms, p_break } => {
                let coin: f64 = rng.random();
                if coin < p_break {
                    return DelaySample::Broken;
                }
                let u: f64 = rng.random();
                DelaySample::Finite(min_ms + (max_ms - min_ms) * u)
            }
        }
    }

    /// Expected finite delay (conditional on the link not being broken).
    pub fn expected_finite_ms(&self) -> f64 {
        match *self {
            DelayModel::Dedicated { base_ms, scale_ms, rate } => base_ms + scale_ms / rate,
            DelayModel::Shared { mean_ms, .. } => mean_ms,
            DelayModel::HighImpairment { min_ms, max_ms, .. } => (min_ms + max_ms) / 2.0,
        }
    }
}
