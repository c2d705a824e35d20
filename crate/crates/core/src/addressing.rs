//! Subnet plan for the modeled autonomous system.
//!
//! The whole infrastructure lives in `10.64.0.0/10`, split into four `/12`
//! blocks: one per QoS area plus an unallocated remainder. Every subnet is a
//! `/24`; routers take the lowest host addresses before any host is added.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Number of `/24` subnets inside one area `/12`.
pub const SUBNETS_PER_AREA: u32 = 1 << (24 - 12);

/// Usable addresses in a `/24` (network and broadcast excluded).
pub const HOSTS_PER_SUBNET: u32 = 254;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AddressingError {
    #[error("invalid prefix length {0}")]
    InvalidPrefix(u8),
    #[error("{0}/{1} has host bits set")]
    HostBitsSet(Ipv4Addr, u8),
    #[error("cannot parse CIDR '{0}'")]
    Parse(String),
    #[error("subnet index {index} out of range for {area} (max {max})", max = SUBNETS_PER_AREA - 1)]
    SubnetIndexOutOfRange { area: AreaKind, index: u32 },
    #[error("subnet {0} is full")]
    SubnetFull(Cidr),
    #[error("router requested in {0} after hosts were allocated")]
    RouterAfterHost(Cidr),
    #[error("address {addr} is not a usable host address of {subnet}")]
    OutsideSubnet { addr: Ipv4Addr, subnet: Cidr },
    #[error("address {addr} is outside the {area} block {block}")]
    OutsideArea { addr: Ipv4Addr, area: AreaKind, block: Cidr },
    #[error("address {0} already allocated")]
    Duplicate(Ipv4Addr),
    #[error("subnet {0} is not a /24")]
    NotSlash24(Cidr),
}

/// The three QoS areas of the modeled network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AreaKind {
    Dedicated,
    SharedLinks,
    HighImpairment,
}

impl AreaKind {
    pub const ALL: [AreaKind; 3] = [AreaKind::Dedicated, AreaKind::SharedLinks, AreaKind::HighImpairment];

    pub fn as_str(self) -> &'static str {
        match self {
            AreaKind::Dedicated => "dedicated",
            AreaKind::SharedLinks => "shared_links",
            AreaKind::HighImpairment => "high_impairment",
        }
    }
}

impl fmt::Display for AreaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An IPv4 network in CIDR notation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cidr {
    base: Ipv4Addr,
    prefix_len: u8,
}

impl Cidr {
    pub fn new(base: Ipv4Addr, prefix_len: u8) -> Result<Self, AddressingError> {
        if prefix_len > 32 {
            return Err(AddressingError::InvalidPrefix(prefix_len));
        }
        let cidr = Cidr { base, prefix_len };
        if u32::from(base) & !cidr.mask() != 0 {
            return Err(AddressingError::HostBitsSet(base, prefix_len));
        }
        Ok(cidr)
    }

    pub fn base(&self) -> Ipv4Addr {
        self.base
    }

    pub fn prefix_len(&self) -> u8 {
        self.prefix_len
    }

    fn mask(&self) -> u32 {
        if self.prefix_len == 0 {
            0
        } else {
            u32::MAX << (32 - self.prefix_len)
        }
    }

    /// Number of addresses covered, including network and broadcast.
    pub fn size(&self) -> u64 {
        1u64 << (32 - self.prefix_len)
    }

    pub fn contains(&self, addr: Ipv4Addr) -> bool {
        u32::from(addr) & self.mask() == u32::from(self.base)
    }

    pub fn contains_cidr(&self, other: &Cidr) -> bool {
        other.prefix_len >= self.prefix_len && self.contains(other.base)
    }

    /// Last address in the block.
    pub fn last(&self) -> Ipv4Addr {
        Ipv4Addr::from(u32::from(self.base) | !self.mask())
    }

    /// The `index`-th sub-block of length `prefix_len` inside this block.
    pub fn subdivide(&self, prefix_len: u8, index: u64) -> Option<Cidr> {
        if prefix_len < self.prefix_len || prefix_len > 32 {
            return None;
        }
        let count = 1u64 << (prefix_len - self.prefix_len);
        if index >= count {
            return None;
        }
        let step = 1u64 << (32 - prefix_len);
        let base = u32::from(self.base) as u64 + index * step;
        Some(Cidr { base: Ipv4Addr::from(base as u32), prefix_len })
    }

    /// Host address at `offset` from the network address (`.1` is offset 1).
    pub fn host(&self, offset: u32) -> Ipv4Addr {
        Ipv4Addr::from(u32::from(self.base) + offset)
    }
}

impl fmt::Display for Cidr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.base, self.prefix_len)
    }
}

impl FromStr for Cidr {
    type Err = AddressingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (addr, len) = s.split_once('/').ok_or_else(|| AddressingError::Parse(s.to_string()))?;
        let addr: Ipv4Addr = addr.parse().map_err(|_| AddressingError::Parse(s.to_string()))?;
        let len: u8 = len.parse().map_err(|_| AddressingError::Parse(s.to_string()))?;
        Cidr::new(addr, len)
    }
}

impl Serialize for Cidr {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Cidr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One of the four `/12` blocks of the plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PlanBlock {
    Area(AreaKind),
    Unallocated,
}

/// The fixed subnet plan of the ICT model.
#[derive(Debug, Clone)]
pub struct SubnetPlan {
    root: Cidr,
    blocks: [(PlanBlock, Cidr); 4],
}

impl Default for SubnetPlan {
    fn default() -> Self {
        let c = |s: &str| s.parse::<Cidr>().expect("static plan");
        SubnetPlan {
            root: c("10.64.0.0/10"),
            blocks: [
                (PlanBlock::Area(AreaKind::Dedicated), c("10.64.0.0/12")),
                (PlanBlock::Area(AreaKind::SharedLinks), c("10.80.0.0/12")),
                (PlanBlock::Area(AreaKind::HighImpairment), c("10.96.0.0/12")),
                (PlanBlock::Unallocated, c("10.112.0.0/12")),
            ],
        }
    }
}

impl SubnetPlan {
    pub fn root(&self) -> Cidr {
        self.root
    }

    pub fn blocks(&self) -> &[(PlanBlock, Cidr); 4] {
        &self.blocks
    }

    pub fn area_block(&self, area: AreaKind) -> Cidr {
        self.block(PlanBlock::Area(area))
    }

    pub fn unallocated_block(&self) -> Cidr {
        self.block(PlanBlock::Unallocated)
    }

    fn block(&self, which: PlanBlock) -> Cidr {
        self.blocks
            .iter()
            .find(|(b, _)| *b == which)
            .map(|(_, c)| *c)
            .expect("plan covers every block")
    }

    /// The `index`-th `/24` of an area (0-based).
    pub fn allocate_subnet(&self, area: AreaKind, index: u32) -> Result<Cidr, AddressingError> {
        self.area_block(area)
            .subdivide(24, index as u64)
            .ok_or(AddressingError::SubnetIndexOutOfRange { area, index })
    }

    /// Which block an address falls into, if it is inside the plan at all.
    pub fn classify(&self, addr: Ipv4Addr) -> Option<PlanBlock> {
        self.blocks.iter().find(|(_, c)| c.contains(addr)).map(|(b, _)| *b)
    }
}

/// Role of an address holder inside a subnet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HostRole {
    Router,
    Host,
}

/// Allocation state of a single `/24`.
#[derive(Debug, Clone)]
pub struct SubnetAllocator {
    subnet: Cidr,
    routers: u32,
    hosts_started: bool,
    taken: BTreeSet<Ipv4Addr>,
}

impl SubnetAllocator {
    pub fn new(subnet: Cidr) -> Result<Self, AddressingError> {
        if subnet.prefix_len() != 24 {
            return Err(AddressingError::NotSlash24(subnet));
        }
        Ok(SubnetAllocator { subnet, routers: 0, hosts_started: false, taken: BTreeSet::new() })
    }

    pub fn subnet(&self) -> Cidr {
        self.subnet
    }

    pub fn allocated(&self) -> usize {
        self.taken.len()
    }

    pub fn allocate(&mut self, role: HostRole) -> Result<Ipv4Addr, AddressingError> {
        if self.taken.len() as u32 >= HOSTS_PER_SUBNET {
            return Err(AddressingError::SubnetFull(self.subnet));
        }
        match role {
            HostRole::Router => {
                if self.hosts_started {
                    return Err(AddressingError::RouterAfterHost(self.subnet));
                }
                self.routers += 1;
                let addr = self.subnet.host(self.routers);
                self.taken.insert(addr);
                Ok(addr)
            }
            HostRole::Host => {
                self.hosts_started = true;
                let addr = (self.routers + 1..=HOSTS_PER_SUBNET)
                    .map(|o| self.subnet.host(o))
                    .find(|a| !self.taken.contains(a))
                    .ok_or(AddressingError::SubnetFull(self.subnet))?;
                self.taken.insert(addr);
                Ok(addr)
            }
        }
    }

    /// Claim a specific host address, e.g. one fixed by a scenario file.
    pub fn reserve_host(&mut self, addr: Ipv4Addr) -> Result<Ipv4Addr, AddressingError> {
        let offset = u32::from(addr).wrapping_sub(u32::from(self.subnet.base()));
        if !self.subnet.contains(addr) || offset == 0 || offset > HOSTS_PER_SUBNET {
            return Err(AddressingError::OutsideSubnet { addr, subnet: self.subnet });
        }
        if offset <= self.routers || self.taken.contains(&addr) {
            return Err(AddressingError::Duplicate(addr));
        }
        if self.taken.len() as u32 >= HOSTS_PER_SUBNET {
            return Err(AddressingError::SubnetFull(self.subnet));
        }
        self.hosts_started = true;
        self.taken.insert(addr);
        Ok(addr)
    }
}

/// Allocation registry over every subnet used by a topology.
#[derive(Debug, Clone, Default)]
pub struct AddressRegistry {
    plan: SubnetPlan,
    subnets: BTreeMap<Cidr, SubnetAllocator>,
}

impl AddressRegistry {
    pub fn new(plan: SubnetPlan) -> Self {
        AddressRegistry { plan, subnets: BTreeMap::new() }
    }

    pub fn plan(&self) -> &SubnetPlan {
        &self.plan
    }

    fn allocator(&mut self, subnet: Cidr) -> Result<&mut SubnetAllocator, AddressingError> {
        if !self.subnets.contains_key(&subnet) {
            self.subnets.insert(subnet, SubnetAllocator::new(subnet)?);
        }
        Ok(self.subnets.get_mut(&subnet).expect("inserted above"))
    }

    pub fn allocate_host(&mut self, subnet: Cidr, role: HostRole) -> Result<Ipv4Addr, AddressingError> {
        self.allocator(subnet)?.allocate(role)
    }

    /// Claim an explicit address inside `subnet` of `area`.
    pub fn reserve(&mut self, area: AreaKind, subnet: Cidr, addr: Ipv4Addr) -> Result<Ipv4Addr, AddressingError> {
        let block = self.plan.area_block(area);
        if !block.contains(addr) {
            return Err(AddressingError::OutsideArea { addr, area, block });
        }
        self.allocator(subnet)?.reserve_host(addr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    #[test]
    fn area_blocks_match_plan_table() {
        let plan = SubnetPlan::default();
        assert_eq!(plan.area_block(AreaKind::Dedicated).to_string(), "10.64.0.0/12");
        assert_eq!(plan.area_block(AreaKind::SharedLinks).to_string(), "10.80.0.0/12");
        assert_eq!(plan.area_block(AreaKind::HighImpairment).to_string(), "10.96.0.0/12");
        assert_eq!(plan.unallocated_block().to_string(), "10.112.0.0/12");
        assert_eq!(plan.root().to_string(), "10.64.0.0/10");
        assert_eq!(plan.root().last(), ip("10.127.255.255"));
    }

    #[test]
    fn subnet_allocation() {
        let plan = SubnetPlan::default();
        assert_eq!(plan.allocate_subnet(AreaKind::Dedicated, 0).unwrap().to_string(), "10.64.0.0/24");
        assert_eq!(plan.allocate_subnet(AreaKind::SharedLinks, 1).unwrap().to_string(), "10.80.1.0/24");
        assert_eq!(
            plan.allocate_subnet(AreaKind::HighImpairment, 4095).unwrap().to_string(),
            "10.111.255.0/24"
        );
        assert_eq!(
            plan.allocate_subnet(AreaKind::Dedicated, 4096),
            Err(AddressingError::SubnetIndexOutOfRange { area: AreaKind::Dedicated, index: 4096 })
        );
    }

    #[test]
    fn subnets_per_area_matches_prefix_arithmetic() {
        // Independent count: a /12 spans 2^20 addresses, a /24 spans 2^8.
        let block = SubnetPlan::default().area_block(AreaKind::Dedicated);
        assert_eq!(block.size() / 256, SUBNETS_PER_AREA as u64);
        assert_eq!(SUBNETS_PER_AREA, 4096);
    }

    #[test]
    fn routers_first() {
        let mut a = SubnetAllocator::new("10.64.0.0/24".parse().unwrap()).unwrap();
        assert_eq!(a.allocate(HostRole::Router).unwrap(), ip("10.64.0.1"));
        assert_eq!(a.allocate(HostRole::Router).unwrap(), ip("10.64.0.2"));
        assert_eq!(a.allocate(HostRole::Host).unwrap(), ip("10.64.0.3"));
        assert_eq!(
            a.allocate(HostRole::Router),
            Err(AddressingError::RouterAfterHost("10.64.0.0/24".parse().unwrap()))
        );
    }

    #[test]
    fn subnet_full_after_254() {
        let mut a = SubnetAllocator::new("10.80.3.0/24".parse().unwrap()).unwrap();
        a.allocate(HostRole::Router).unwrap();
        for _ in 0..253 {
            a.allocate(HostRole::Host).unwrap();
        }
        assert!(matches!(a.allocate(HostRole::Host), Err(AddressingError::SubnetFull(_))));
    }

    #[test]
    fn reserve_rejects_foreign_addresses() {
        let mut reg = AddressRegistry::default();
        let subnet: Cidr = "10.64.0.0/24".parse().unwrap();
        reg.allocate_host(subnet, HostRole::Router).unwrap();
        assert!(matches!(
            reg.reserve(AreaKind::Dedicated, subnet, ip("192.168.0.5")),
            Err(AddressingError::OutsideArea { .. })
        ));
        assert!(matches!(
            reg.reserve(AreaKind::Dedicated, subnet, ip("10.64.0.255")),
            Err(AddressingError::OutsideSubnet { .. })
        ));
        assert!(matches!(reg.reserve(AreaKind::Dedicated, subnet, ip("10.64.0.1")), Err(AddressingError::Duplicate(_))));
        assert_eq!(reg.reserve(AreaKind::Dedicated, subnet, ip("10.64.0.9")).unwrap(), ip("10.64.0.9"));
        // automatic allocation skips reserved addresses
        assert_eq!(reg.allocate_host(subnet, HostRole::Host).unwrap(), ip("10.64.0.2"));
    }

    #[test]
    fn cidr_rejects_host_bits() {
        assert!("10.64.0.1/24".parse::<Cidr>().is_err());
        assert!("10.64.0.0/33".parse::<Cidr>().is_err());
        assert!("nonsense".parse::<Cidr>().is_err());
    }

    #[test]
    fn classify_addresses() {
        let plan = SubnetPlan::default();
        assert_eq!(plan.classify(ip("10.112.0.9")), Some(PlanBlock::Unallocated));
        assert_eq!(plan.classify(ip("10.97.1.1")), Some(PlanBlock::Area(AreaKind::HighImpairment)));
        assert_eq!(plan.classify(ip("10.128.0.1")), None);
    }
}
