use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::{DelayModel, NetsimError};
use crate::addressing::AreaKind;

pub const NOMINAL_RATE_BPS: u64 = 1_000_000_000;
pub const HIGH_IMPAIRMENT_MIN_RATE_BPS: u64 = 50_000;
pub const HIGH_IMPAIRMENT_MAX_RATE_BPS: u64 = 100_000_000;
pub const DEFAULT_QUEUE_CAPACITY: usize = 1000;

/// Declarative description of the simulated autonomous system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub seed: u64,
    #[serde(default)]
    pub areas: AreaSettings,
    pub subnets: Vec<SubnetSpec>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaSettings {
    #[serde(default = "AreaConfig::dedicated")]
    pub dedicated: AreaConfig,
    #[serde(default = "AreaConfig::shared_links")]
    pub shared_links: AreaConfig,
    #[serde(default = "AreaConfig::high_impairment")]
    pub high_impairment: AreaConfig,
}

impl Default for AreaSettings {
    fn default() -> Self {
        AreaSettings {
            dedicated: AreaConfig::dedicated(),
            shared_links: AreaConfig::shared_links(),
            high_impairment: AreaConfig::high_impairment(),
        }
    }
}

impl AreaSettings {
    pub fn get(&self, kind: AreaKind) -> &AreaConfig {
        match kind {
            AreaKind::Dedicated => &self.dedicated,
            AreaKind::SharedLinks => &self.shared_links,
            AreaKind::HighImpairment => &self.high_impairment,
        }
    }

    pub fn get_mut(&mut self, kind: AreaKind) -> &mut AreaConfig {
        match kind {
            AreaKind::Dedicated => &mut self.dedicated,
            AreaKind::SharedLinks => &mut self.shared_links,
            AreaKind::HighImpairment => &mut self.high_impairment,
        }
    }

    pub fn validate(&self) -> Result<(), NetsimError> {
        for kind in AreaKind::ALL {
            let cfg = self.get(kind);
            if cfg.delay.kind() != kind {
                return Err(NetsimError::InvalidDelayModel(format!(
                    "area {kind} configured with the {} delay law",
                    cfg.delay.kind()
                )));
            }
            cfg.delay.validate()?;
            check_rate(kind, cfg.data_rate_bps)?;
            if cfg.queue_capacity == 0 {
                return Err(NetsimError::InvalidLink(format!("area {kind}: queue_capacity must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Rate bounds per area: nominal 1 Gbit/s for the wired areas,
/// 50 kbit/s to 100 Mbit/s for the high-impairment area.
pub fn check_rate(area: AreaKind, rate_bps: u64) -> Result<(), NetsimError> {
    let (lo, hi) = match area {
        AreaKind::Dedicated | AreaKind::SharedLinks => (1, NOMINAL_RATE_BPS),
        AreaKind::HighImpairment => (HIGH_IMPAIRMENT_MIN_RATE_BPS, HIGH_IMPAIRMENT_MAX_RATE_BPS),
    };
    if rate_bps < lo || rate_bps > hi {
        return Err(NetsimError::InvalidLink(format!(
            "data rate {rate_bps} bit/s outside [{lo}, {hi}] for area {area}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaConfig {
    pub delay: DelayModel,
    pub data_rate_bps: u64,
    #[serde(default = "default_queue_capacity")]
    pub queue_capacity: usize,
}

fn default_queue_capacity() -> usize {
    DEFAULT_QUEUE_CAPACITY
}

impl AreaConfig {
    pub fn dedicated() -> Self {
        AreaConfig { delay: DelayModel::DEDICATED, data_rate_bps: NOMINAL_RATE_BPS, queue_capacity: DEFAULT_QUEUE_CAPACITY }
    }

    pub fn shared_links() -> Self {
        AreaConfig { delay: DelayModel::SHARED, data_rate_bps: NOMINAL_RATE_BPS, queue_capacity: DEFAULT_QUEUE_CAPACITY }
    }

    pub fn high_impairment() -> Self {
        AreaConfig {
            delay: DelayModel::HIGH_IMPAIRMENT,
            data_rate_bps: 1_000_000,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
        }
    }
}

/// One `/24` of the plan with the routers and hosts attached to it.
///
/// Hosts are attached to the first router; routers of the same subnet are
/// chained in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubnetSpec {
    pub name: String,
    pub area: AreaKind,
    pub index: u32,
    pub routers: Vec<String>,
    #[serde(default)]
    pub hosts: Vec<HostSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HostSpec {
    Name(String),
    Detailed {
        name: String,
        #[serde(default)]
        ip: Option<Ipv4Addr>,
        #[serde(default)]
        gateway: Option<bool>,
    },
}

impl HostSpec {
    pub fn name(&self) -> &str {
        match self {
            HostSpec::Name(n) | HostSpec::Detailed { name: n, .. } => n,
        }
    }

    pub fn ip(&self) -> Option<Ipv4Addr> {
        match self {
            HostSpec::Name(_) => None,
            HostSpec::Detailed { ip, .. } => *ip,
        }
    }

    /// App gateways are the default; a plain host carries no application.
    pub fn is_gateway(&self) -> bool {
        match self {
            HostSpec::Name(_) => true,
            HostSpec::Detailed { gateway, .. } => gateway.unwrap_or(true),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    #[serde(default)]
    pub area: Option<AreaKind>,
    #[serde(default)]
    pub data_rate_bps: Option<u64>,
    #[serde(default)]
    pub queue_capacity: Option<usize>,
}

impl TopologySpec {
    /// One router and `hosts` gateways in the first dedicated subnet.
    pub fn star(seed: u64, hosts: &[&str]) -> Self {
        TopologySpec {
            seed,
            areas: AreaSettings::default(),
            subnets: vec![SubnetSpec {
                name: "lan".into(),
                area: AreaKind::Dedicated,
                index: 0,
                routers: vec!["r0".into()],
                hosts: hosts.iter().map(|h| HostSpec::Name(h.to_string())).collect(),
            }],
            links: vec![],
        }
    }
}
