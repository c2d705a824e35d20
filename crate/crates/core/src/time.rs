use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

/// Simulation time in whole milliseconds since scenario start.
///
/// The kernel advances in lockstep increments of one millisecond.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_millis(ms: u64) -> Self {
        SimTime(ms)
    }

    pub fn as_millis(self) -> u64 {
        self.0
    }

    pub fn next(self) -> Self {
        SimTime(self.0 + 1)
    }

    pub fn as_nanos(self) -> Nanos {
        Nanos(self.0 * Nanos::PER_MILLI)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.0)
    }
}

impl Add<u64> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: u64) -> SimTime {
        SimTime(self.0 + rhs)
    }
}

/// Fine-grained event time inside the network simulator.
///
/// Delays are sampled as real milliseconds and stored here rounded to the
/// nearest nanosecond, so sums along a path are exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Nanos(pub u64);

impl Nanos {
    pub const ZERO: Nanos = Nanos(0);
    pub const PER_MILLI: u64 = 1_000_000;

    pub fn from_millis_f64(ms: f64) -> Self {
        debug_assert!(ms.is_finite() && ms >= 0.0);
        Nanos((ms * Self::PER_MILLI as f64).round() as u64)
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / Self::PER_MILLI as f64
    }

    /// The first kernel step strictly after this instant.
    pub fn delivery_step(self) -> SimTime {
        SimTime(self.0 / Self::PER_MILLI + 1)
    }

    pub fn saturating_sub(self, rhs: Nanos) -> Nanos {
        Nanos(self.0.saturating_sub(rhs.0))
    }
}

impl Add for Nanos {
    type Output = Nanos;
    fn add(self, rhs: Nanos) -> Nanos {
        Nanos(self.0 + rhs.0)
    }
}

impl Sub for Nanos {
    type Output = Nanos;
    fn sub(self, rhs: Nanos) -> Nanos {
        Nanos(self.0 - rhs.0)
    }
}

impl fmt::Display for Nanos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}ms", self.as_millis_f64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delivery_step_is_first_step_after_arrival() {
        assert_eq!(Nanos(12_312_000).delivery_step(), SimTime(13));
        assert_eq!(Nanos(13_000_000).delivery_step(), SimTime(14));
        assert_eq!(Nanos(0).delivery_step(), SimTime(1));
    }

    #[test]
    fn millis_round_trip() {
        assert_eq!(Nanos::from_millis_f64(12.3), Nanos(12_300_000));
        assert_eq!(SimTime(7).as_nanos(), Nanos(7_000_000));
    }
}
