use std::collections::{BTreeMap, HashMap, VecDeque};
use std::net::{IpAddr, Ipv4Addr};

use super::spec::{check_rate, AreaSettings, TopologySpec};
use super::{DelayModel, NetsimError};
use crate::addressing::{AddressRegistry, AreaKind, Cidr, HostRole, SubnetPlan};

pub type NodeId = usize;
pub type LinkId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRole {
    Router,
    Host,
    AppGateway,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub role: NodeRole,
    pub ip: Ipv4Addr,
    pub subnet: Cidr,
    pub area: AreaKind,
}

/// Bidirectional link; each direction has its own transmitter and queue.
#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub id: LinkId,
    pub endpoints: (NodeId, NodeId),
    pub data_rate_bps: u64,
    pub area: AreaKind,
    pub queue_capacity: usize,
    pub delay: DelayModel,
}

impl Link {
    pub fn other(&self, n: NodeId) -> NodeId {
        if self.endpoints.0 == n {
            self.endpoints.1
        } else {
            self.endpoints.0
        }
    }

    /// Direction index: 0 when leaving the first endpoint.
    pub fn direction_from(&self, n: NodeId) -> usize {
        usize::from(self.endpoints.0 != n)
    }
}

#[derive(Debug, Clone)]
pub struct Topology {
    nodes: Vec<Node>,
    links: Vec<Link>,
    adjacency: Vec<Vec<(NodeId, LinkId)>>,
    by_ip: HashMap<Ipv4Addr, NodeId>,
    by_name: HashMap<String, NodeId>,
    // next_hop[at][dst]
    next_hop: Vec<Vec<Option<(NodeId, LinkId)>>>,
    areas: AreaSettings,
    plan: SubnetPlan,
}

impl Topology {
    pub fn build(spec: &TopologySpec) -> Result<Topology, NetsimError> {
        spec.areas.validate()?;
        let plan = SubnetPlan::default();
        let mut registry = AddressRegistry::new(plan.clone());
        let mut nodes: Vec<Node> = Vec::new();
        let mut by_name = HashMap::new();
        let mut subnets_seen: BTreeMap<Cidr, String> = BTreeMap::new();
        let mut pending_links: Vec<(NodeId, NodeId, AreaKind, Option<u64>, Option<usize>)> = Vec::new();

        let mut add_node = |nodes: &mut Vec<Node>, name: &str, role, ip, subnet, area| {
            if by_name.contains_key(name) {
                return Err(NetsimError::DuplicateNode(name.to_string()));
            }
            let id = nodes.len();
            by_name.insert(name.to_string(), id);
            nodes.push(Node { id, name: name.to_string(), role, ip, subnet, area });
            Ok(id)
        };

        for s in &spec.subnets {
            let cidr = plan.allocate_subnet(s.area, s.index)?;
            if let Some(prev) = subnets_seen.insert(cidr, s.name.clone()) {
                return Err(NetsimError::DuplicateSubnet(format!("{cidr} used by {prev:?} and {:?}", s.name)));
            }
            if s.routers.is_empty() && !s.hosts.is_empty() {
                return Err(NetsimError::NoRouter(s.name.clone()));
            }
            let mut routers = Vec::new();
            for r in &s.routers {
                let ip = registry.allocate_host(cidr, HostRole::Router)?;
                routers.push(add_node(&mut nodes, r, NodeRole::Router, ip, cidr, s.area)?);
            }
            for w in routers.windows(2) {
                pending_links.push((w[0], w[1], s.area, None, None));
            }
            for h in &s.hosts {
                let ip = match h.ip() {
                    Some(ip) => registry.reserve(s.area, cidr, ip)?,
                    None => registry.allocate_host(cidr, HostRole::Host)?,
                };
                let role = if h.is_gateway() { NodeRole::AppGateway } else { NodeRole::Host };
                let id = add_node(&mut nodes, h.name(), role, ip, cidr, s.area)?;
                pending_links.push((id, routers[0], s.area, None, None));
            }
        }

        for l in &spec.links {
            let a = *by_name.get(&l.a).ok_or_else(|| NetsimError::UnknownNode(l.a.clone()))?;
            let b = *by_name.get(&l.b).ok_or_else(|| NetsimError::UnknownNode(l.b.clone()))?;
            if a == b {
                return Err(NetsimError::InvalidLink(format!("self-link on {:?}", l.a)));
            }
            let area = match l.area {
                Some(area) => area,
                None if nodes[a].area == nodes[b].area => nodes[a].area,
                None => {
                    return Err(NetsimError::InvalidLink(format!(
                        "link {:?}-{:?} joins {} and {}; its area must be given",
                        l.a, l.b, nodes[a].area, nodes[b].area
                    )))
                }
            };
            pending_links.push((a, b, area, l.data_rate_bps, l.queue_capacity));
        }

        let mut links = Vec::with_capacity(pending_links.len());
        let mut adjacency = vec![Vec::new(); nodes.len()];
        for (a, b, area, rate, cap) in pending_links {
            if adjacency[a].iter().any(|&(n, _)| n == b) {
                return Err(NetsimError::InvalidLink(format!(
                    "duplicate link {:?}-{:?}",
                    nodes[a].name, nodes[b].name
                )));
            }
            let cfg = spec.areas.get(area);
            let data_rate_bps = rate.unwrap_or(cfg.data_rate_bps);
            check_rate(area, data_rate_bps)?;
            let queue_capacity = cap.unwrap_or(cfg.queue_capacity);
            if queue_capacity == 0 {
                return Err(NetsimError::InvalidLink("queue_capacity must be >= 1".into()));
            }
            let id = links.len();
            links.push(Link { id, endpoints: (a, b), data_rate_bps, area, queue_capacity, delay: cfg.delay });
            adjacency[a].push((b, id));
            adjacency[b].push((a, id));
        }

        let by_ip = nodes.iter().map(|n| (n.ip, n.id)).collect();
        let mut topo = Topology {
            nodes,
            links,
            adjacency,
            by_ip,
            by_name,
            next_hop: Vec::new(),
            areas: spec.areas.clone(),
            plan,
        };
        topo.check_connected()?;
        topo.compute_routes();
        Ok(topo)
    }

    fn check_connected(&self) -> Result<(), NetsimError> {
        let Some(first) = self.nodes.first() else { return Ok(()) };
        let dist = self.bfs(first.id);
        if let Some(n) = self.nodes.iter().find(|n| dist[n.id].is_none()) {
            return Err(NetsimError::Disconnected(n.name.clone(), first.name.clone()));
        }
        Ok(())
    }

    fn bfs(&self, from: NodeId) -> Vec<Option<u32>> {
        let mut dist = vec![None; self.nodes.len()];
        dist[from] = Some(0);
        let mut q = VecDeque::from([from]);
        while let Some(n) = q.pop_front() {
            let d = dist[n].expect("queued nodes have a distance");
            for &(m, _) in &self.adjacency[n] {
                if dist[m].is_none() {
                    dist[m] = Some(d + 1);
                    q.push_back(m);
                }
            }
        }
        dist
    }

    /// Hop-count shortest paths; among equal candidates the neighbour with
    /// the lowest IP wins.
    fn compute_routes(&mut self) {
        let n = self.nodes.len();
        let mut table = vec![vec![None; n]; n];
        for dst in 0..n {
            let dist = self.bfs(dst);
            for at in 0..n {
                if at == dst {
                    continue;
                }
                let Some(d) = dist[at] else { continue };
                table[at][dst] = self.adjacency[at]
                    .iter()
                    .filter(|&&(m, _)| dist[m] == Some(d - 1))
                    .min_by_key(|&&(m, _)| self.nodes[m].ip)
                    .copied();
            }
        }
        self.next_hop = table;
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id]
    }

    pub fn neighbours(&self, id: NodeId) -> &[(NodeId, LinkId)] {
        &self.adjacency[id]
    }

    pub fn areas(&self) -> &AreaSettings {
        &self.areas
    }

    pub fn plan(&self) -> &SubnetPlan {
        &self.plan
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).copied()
    }

    pub fn node_by_ip(&self, ip: IpAddr) -> Option<NodeId> {
        match ip {
            IpAddr::V4(v4) => self.by_ip.get(&v4).copied(),
            IpAddr::V6(_) => None,
        }
    }

    pub fn gateways(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.role == NodeRole::AppGateway)
    }

    pub fn next_hop(&self, at: NodeId, dst: NodeId) -> Option<(NodeId, LinkId)> {
        self.next_hop[at][dst]
    }

    /// Node sequence from `src_ip` to `dst_ip`, both ends included.
    pub fn route(&self, src_ip: IpAddr, dst_ip: IpAddr) -> Result<Vec<NodeId>, NetsimError> {
        let no_route = || NetsimError::NoRoute(src_ip.to_string(), dst_ip.to_string());
        let src = self.node_by_ip(src_ip).ok_or_else(no_route)?;
        let dst = self.node_by_ip(dst_ip).ok_or_else(no_route)?;
        let mut path = vec![src];
        let mut at = src;
        while at != dst {
            let (next, _) = self.next_hop(at, dst).ok_or_else(no_route)?;
            path.push(next);
            at = next;
        }
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addressing::AddressingError;
    use crate::netsim::spec::{HostSpec, LinkSpec, SubnetSpec};

    fn ip(s: &str) -> IpAddr {
        s.parse().unwrap()
    }

    #[test]
    fn star_routes_through_router() {
        let t = Topology::build(&TopologySpec::star(1, &["a", "b"])).unwrap();
        let r0 = t.node_by_name("r0").unwrap();
        assert_eq!(t.node(r0).ip, "10.64.0.1".parse::<Ipv4Addr>().unwrap());
        let path = t.route(ip("10.64.0.2"), ip("10.64.0.3")).unwrap();
        assert_eq!(path, vec![t.node_by_name("a").unwrap(), r0, t.node_by_name("b").unwrap()]);
    }

    #[test]
    fn host_outside_plan_rejected() {
        let mut spec = TopologySpec::star(1, &["a"]);
        spec.subnets[0].hosts.push(HostSpec::Detailed {
            name: "x".into(),
            ip: Some("192.168.0.5".parse().unwrap()),
            gateway: None,
        });
        let err = Topology::build(&spec).unwrap_err();
        assert!(matches!(err, NetsimError::Addressing(AddressingError::OutsideArea { .. })), "{err:?}");
    }

    #[test]
    fn disconnected_rejected() {
        let mut spec = TopologySpec::star(1, &["a"]);
        spec.subnets.push(SubnetSpec {
            name: "island".into(),
            area: AreaKind::SharedLinks,
            index: 0,
            routers: vec!["r1".into()],
            hosts: vec![HostSpec::Name("b".into())],
        });
        assert!(matches!(Topology::build(&spec), Err(NetsimError::Disconnected(..))));
    }

    #[test]
    fn mixed_area_link_needs_area() {
        let mut spec = TopologySpec::star(1, &["a"]);
        spec.subnets.push(SubnetSpec {
            name: "s".into(),
            area: AreaKind::SharedLinks,
            index: 0,
            routers: vec!["r1".into()],
            hosts: vec![],
        });
        spec.links.push(LinkSpec { a: "r0".into(), b: "r1".into(), area: None, data_rate_bps: None, queue_capacity: None });
        assert!(matches!(Topology::build(&spec), Err(NetsimError::InvalidLink(_))));
        spec.links[0].area = Some(AreaKind::SharedLinks);
        Topology::build(&spec).unwrap();
    }

    #[test]
    fn high_impairment_rate_bounds() {
        let mut spec = TopologySpec::star(1, &["a", "b"]);
        spec.subnets[0].area = AreaKind::HighImpairment;
        spec.areas.high_impairment.data_rate_bps = 49_999;
        assert!(Topology::build(&spec).is_err());
        spec.areas.high_impairment.data_rate_bps = 50_000;
        Topology::build(&spec).unwrap();
        spec.areas.high_impairment.data_rate_bps = 100_000_001;
        assert!(Topology::build(&spec).is_err());
    }

    #[test]
    fn tie_break_prefers_lowest_next_hop_ip() {
        // a - r0 - {r1, r2} - r3 - b : two equal-length paths via r1 or r2.
        let spec = TopologySpec {
            seed: 0,
            areas: AreaSettings::default(),
            subnets: vec![
                SubnetSpec {
                    name: "left".into(),
                    area: AreaKind::Dedicated,
                    index: 0,
                    routers: vec!["r0".into()],
                    hosts: vec![HostSpec::Name("a".into())],
                },
                SubnetSpec {
                    name: "mid2".into(),
                    area: AreaKind::Dedicated,
                    index: 2,
                    routers: vec!["r2".into()],
                    hosts: vec![],
                },
                SubnetSpec {
                    name: "mid1".into(),
                    area: AreaKind::Dedicated,
                    index: 1,
                    routers: vec!["r1".into()],
                    hosts: vec![],
                },
                SubnetSpec {
                    name: "right".into(),
                    area: AreaKind::Dedicated,
                    index: 3,
                    routers: vec!["r3".into()],
                    hosts: vec![HostSpec::Name("b".into())],
                },
            ],
            links: ["r0-r2", "r0-r1", "r2-r3", "r1-r3"]
                .iter()
                .map(|s| {
                    let (a, b) = s.split_once('-').unwrap();
                    LinkSpec { a: a.into(), b: b.into(), area: None, data_rate_bps: None, queue_capacity: None }
                })
                .collect(),
        };
        let t = Topology::build(&spec).unwrap();
        let names: Vec<&str> = t
            .route(ip("10.64.0.2"), ip("10.64.3.2"))
            .unwrap()
            .into_iter()
            .map(|n| t.node(n).name.as_str())
            .collect();
        assert_eq!(names, ["a", "r0", "r1", "r3", "b"]);
    }

    #[test]
    fn unallocated_destination_has_no_route() {
        let t = Topology::build(&TopologySpec::star(1, &["a"])).unwrap();
        assert!(matches!(t.route(ip("10.64.0.2"), ip("10.112.0.9")), Err(NetsimError::NoRoute(..))));
    }
}
