//! Userspace packet bridge between unmodified applications and the
//! co-simulation: `vif` beside each app, `vif-sim` beside the kernel.

pub mod device;
pub mod vif;
pub mod vifsim;

pub use vif::{run_vif, HelloBurst, PreStartBuffer, TransportConfig, VifConfig, VifError, VifStats, MAX_DATAGRAM};
pub use vifsim::{run_vifsim, Mode, VifSimConfig, VifSimError, VifSimStats};
