//! Building blocks for a software-in-the-loop ICT co-simulation.
//!
//! - [`kernel`]: a lockstep co-simulation kernel with an attribute dataflow
//!   graph and a length-prefixed request/reply protocol for out-of-process
//!   simulators.
//! - [`netsim`]: a discrete-event simulator of one autonomous system with
//!   three QoS areas.
//! - [`addressing`]: the `10.64.0.0/10` subnet plan.
//! - [`packet`]: IP header inspection, stream reassembly and Base64 transport
//!   encoding of raw packets.
//! - [`grid`]: a toy radial power-grid model producing readings that react to
//!   setpoints.

pub mod addressing;
pub mod grid;
pub mod kernel;
pub mod netsim;
pub mod packet;
pub mod time;

pub use time::{Nanos, SimTime};
