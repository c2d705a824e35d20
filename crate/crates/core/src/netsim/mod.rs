//! Discrete-event model of one autonomous system with three QoS areas.

mod delay;
mod engine;
mod simulator;
mod spec;
mod topology;

use thiserror::Error;

pub use crate::addressing::AreaKind;
use crate::addressing::AddressingError;
pub use delay::{DelayModel, DelaySample};
pub use engine::{AreaCounters, Counters, DeliveryRecord, DropReason, DropRecord, HopRecord, NetworkSim};
pub use simulator::{IctSimulator, NETWORK_NODE_MODEL};
pub use spec::{
    check_rate, AreaConfig, AreaSettings, HostSpec, LinkSpec, SubnetSpec, TopologySpec, DEFAULT_QUEUE_CAPACITY,
    HIGH_IMPAIRMENT_MAX_RATE_BPS, HIGH_IMPAIRMENT_MIN_RATE_BPS, NOMINAL_RATE_BPS,
};
pub use topology::{Link, LinkId, Node, NodeId, NodeRole, Topology};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetsimError {
    #[error("invalid delay model: {0}")]
    InvalidDelayModel(String),
    #[error("invalid link: {0}")]
    InvalidLink(String),
    #[error(transparent)]
    Addressing(#[from] AddressingError),
    #[error("duplicate node name {0:?}")]
    DuplicateNode(String),
    #[error("duplicate subnet {0}")]
    DuplicateSubnet(String),
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("subnet {0:?} has hosts but no router")]
    NoRouter(String),
    #[error("topology is disconnected: {0:?} unreachable from {1:?}")]
    Disconnected(String, String),
    #[error("no route from {0} to {1}")]
    NoRoute(String, String),
    #[error("time went backwards: now {now_ns} ns, asked to step until {until_ns} ns")]
    TimeWentBackwards { now_ns: u64, until_ns: u64 },
}
