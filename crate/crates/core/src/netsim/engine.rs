use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::topology::{LinkId, NodeId, NodeRole, Topology};
use super::{DelaySample, NetsimError, TopologySpec};
use crate::addressing::AreaKind;
use crate::packet::Packet;
use crate::time::{Nanos, SimTime};

/// Timing of one hop, all in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HopRecord {
    pub link: LinkId,
    pub from: NodeId,
    pub to: NodeId,
    /// Time the packet reached `from`.
    pub at: Nanos,
    pub queue_wait: Nanos,
    pub serialization: Nanos,
    pub sampled_delay: Nanos,
    /// Extra wait so the packet does not overtake an earlier one on this link.
    pub fifo_hold: Nanos,
}

impl HopRecord {
    pub fn total(&self) -> Nanos {
        self.queue_wait + self.serialization + self.sampled_delay + self.fifo_hold
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryRecord {
    pub packet_id: u64,
    pub packet: Packet,
    pub src: NodeId,
    pub dst: NodeId,
    pub ingress: Nanos,
    pub arrival: Nanos,
    pub hops: Vec<HopRecord>,
}

impl DeliveryRecord {
    pub fn transit(&self) -> Nanos {
        self.arrival - self.ingress
    }

    pub fn sampled_delay(&self) -> Nanos {
        self.hops.iter().fold(Nanos(0), |acc, h| acc + h.sampled_delay)
    }

    pub fn serialization(&self) -> Nanos {
        self.hops.iter().fold(Nanos(0), |acc, h| acc + h.serialization)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DropReason {
    /// The area's delay law returned "broken".
    Lost { link: LinkId },
    QueueFull { link: LinkId },
    Unroutable,
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropRecord {
    pub packet_id: u64,
    pub packet: Option<Packet>,
    pub at: Nanos,
    pub reason: DropReason,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub injected: u64,
    pub delivered: u64,
    pub lost: u64,
    pub queue_dropped: u64,
    pub unroutable: u64,
    pub malformed: u64,
    pub in_flight: u64,
}

impl Counters {
    pub fn dropped(&self) -> u64 {
        self.lost + self.queue_dropped + self.unroutable + self.malformed
    }

    pub fn conserved(&self) -> bool {
        self.injected == self.delivered + self.dropped() + self.in_flight
    }
}

/// Per-area counters. Losses and queue drops are charged to the area of the
/// link, deliveries to the area of the destination, other drops to the area
/// of the injecting node.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AreaCounters {
    pub delivered: u64,
    pub lost: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone, Default)]
struct DirState {
    busy_until: Nanos,
    last_arrival: Nanos,
    // Transmission end times of packets occupying the queue.
    occupancy: VecDeque<Nanos>,
}

#[derive(Debug, Clone)]
struct Flight {
    packet: Packet,
    src: NodeId,
    dst: NodeId,
    at: NodeId,
    ingress: Nanos,
    hops: Vec<HopRecord>,
}

/// The event-driven packet forwarder.
#[derive(Debug, Clone)]
pub struct NetworkSim {
    topo: Topology,
    rng: ChaCha8Rng,
    now: Nanos,
    seq: u64,
    next_packet_id: u64,
    events: BinaryHeap<Reverse<(Nanos, u64, u64)>>,
    dirs: Vec<[DirState; 2]>,
    flights: HashMap<u64, Flight>,
    counters: Counters,
    areas: BTreeMap<AreaKind, AreaCounters>,
    logging: bool,
    deliveries: Vec<DeliveryRecord>,
    drops: Vec<DropRecord>,
}

impl NetworkSim {
    pub fn new(topo: Topology, seed: u64) -> NetworkSim {
        let dirs = vec![<[DirState; 2]>::default(); topo.links().len()];
        NetworkSim {
            topo,
            rng: ChaCha8Rng::seed_from_u64(seed),
            now: Nanos(0),
            seq: 0,
            next_packet_id: 0,
            events: BinaryHeap::new(),
            dirs,
            flights: HashMap::new(),
            counters: Counters::default(),
            areas: AreaKind::ALL.iter().map(|&k| (k, AreaCounters::default())).collect(),
            logging: true,
            deliveries: Vec::new(),
            drops: Vec::new(),
        }
    }

    pub fn from_spec(spec: &TopologySpec) -> Result<NetworkSim, NetsimError> {
        Ok(NetworkSim::new(Topology::build(spec)?, spec.seed))
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    pub fn counters(&self) -> Counters {
        Counters { in_flight: self.flights.len() as u64, ..self.counters }
    }

    pub fn area_counters(&self) -> &BTreeMap<AreaKind, AreaCounters> {
        &self.areas
    }

    pub fn set_logging(&mut self, on: bool) {
        self.logging = on;
    }

    pub fn deliveries(&self) -> &[DeliveryRecord] {
        &self.deliveries
    }

    pub fn drops(&self) -> &[DropRecord] {
        &self.drops
    }

    pub fn take_deliveries(&mut self) -> Vec<DeliveryRecord> {
        std::mem::take(&mut self.deliveries)
    }

    pub fn take_drops(&mut self) -> Vec<DropRecord> {
        std::mem::take(&mut self.drops)
    }

    fn area_mut(&mut self, kind: AreaKind) -> &mut AreaCounters {
        self.areas.entry(kind).or_default()
    }

    fn record_drop(&mut self, packet_id: u64, packet: Option<Packet>, at: Nanos, reason: DropReason) {
        if self.logging {
            self.drops.push(DropRecord { packet_id, packet, at, reason });
        }
    }

    fn ingress_time(&self, now: SimTime) -> Nanos {
        now.as_nanos().max(self.now)
    }

    /// Inject raw bytes; anything that is not a single whole IP packet is
    /// counted as malformed and dropped.
    pub fn inject_bytes(&mut self, node: NodeId, bytes: &[u8], now: SimTime) -> Result<u64, NetsimError> {
        match Packet::parse(bytes.to_vec()) {
            Ok(p) => self.inject(node, p, now),
            Err(e) => self.reject_malformed(node, e.to_string(), now),
        }
    }

    /// Count something injected at `node` that could not be read as a packet.
    pub fn reject_malformed(&mut self, node: NodeId, reason: String, now: SimTime) -> Result<u64, NetsimError> {
        let src_area = self.node_area(node)?;
        let id = self.alloc_id();
        self.counters.injected += 1;
        self.counters.malformed += 1;
        self.area_mut(src_area).dropped += 1;
        let at = self.ingress_time(now);
        self.record_drop(id, None, at, DropReason::Malformed(reason));
        Ok(id)
    }

    fn node_area(&self, node: NodeId) -> Result<AreaKind, NetsimError> {
        self.topo
            .nodes()
            .get(node)
            .map(|n| n.area)
            .ok_or_else(|| NetsimError::UnknownNode(format!("#{node}")))
    }

    fn alloc_id(&mut self) -> u64 {
        let id = self.next_packet_id;
        self.next_packet_id += 1;
        id
    }

    /// Inject a packet at `node`. Returns the packet id used in the logs.
    pub fn inject(&mut self, node: NodeId, packet: Packet, now: SimTime) -> Result<u64, NetsimError> {
        let src_area = self.node_area(node)?;
        let id = self.alloc_id();
        let ingress = self.ingress_time(now);
        self.counters.injected += 1;

        let dst = self
            .topo
            .node_by_ip(packet.dst())
            .filter(|&d| self.topo.node(d).role != NodeRole::Router)
            .filter(|&d| d == node || self.topo.next_hop(node, d).is_some());
        let Some(dst) = dst else {
            self.counters.unroutable += 1;
            self.area_mut(src_area).dropped += 1;
            self.record_drop(id, Some(packet), ingress, DropReason::Unroutable);
            return Ok(id);
        };

        let packet = packet.with_ingress_time(SimTime::from_millis(ingress.0 / Nanos::PER_MILLI));
        self.flights.insert(id, Flight { packet, src: node, dst, at: node, ingress, hops: Vec::new() });
        self.schedule(ingress, id);
        Ok(id)
    }

    fn schedule(&mut self, at: Nanos, flight: u64) {
        self.events.push(Reverse((at, self.seq, flight)));
        self.seq += 1;
    }

    /// Process every event strictly before `until`; returns the packets
    /// delivered to each app gateway, in delivery order.
    pub fn step(&mut self, until: SimTime) -> Result<BTreeMap<NodeId, Vec<Packet>>, NetsimError> {
        let until_ns = until.as_nanos();
        if until_ns < self.now {
            return Err(NetsimError::TimeWentBackwards { now_ns: self.now.0, until_ns: until_ns.0 });
        }
        let mut out: BTreeMap<NodeId, Vec<Packet>> = BTreeMap::new();
        while let Some(Reverse((t, _, _))) = self.events.peek() {
            if *t >= until_ns {
                break;
            }
            let Reverse((t, _, id)) = self.events.pop().expect("peeked");
            self.now = t;
            self.process(t, id, &mut out);
        }
        self.now = until_ns;
        Ok(out)
    }

    fn process(&mut self, t: Nanos, id: u64, out: &mut BTreeMap<NodeId, Vec<Packet>>) {
        let (at, dst) = {
            let f = &self.flights[&id];
            (f.at, f.dst)
        };
        if at == dst {
            let f = self.flights.remove(&id).expect("flight exists");
            self.counters.delivered += 1;
            let area = self.topo.node(dst).area;
            self.area_mut(area).delivered += 1;
            if self.topo.node(dst).role == NodeRole::AppGateway {
                out.entry(dst).or_default().push(f.packet.clone());
            }
            if self.logging {
                self.deliveries.push(DeliveryRecord {
                    packet_id: id,
                    packet: f.packet,
                    src: f.src,
                    dst,
                    ingress: f.ingress,
                    arrival: t,
                    hops: f.hops,
                });
            }
            return;
        }

        let (next, link_id) = self.topo.next_hop(at, dst).expect("route checked at injection");
        let link = self.topo.link(link_id);
        let (rate, capacity, area, delay) = (link.data_rate_bps, link.queue_capacity, link.area, link.delay);
        let dir = &mut self.dirs[link_id][link.direction_from(at)];

        while dir.occupancy.front().is_some_and(|&done| done <= t) {
            dir.occupancy.pop_front();
        }
        if dir.occupancy.len() >= capacity {
            let f = self.flights.remove(&id).expect("flight exists");
            self.counters.queue_dropped += 1;
            self.area_mut(area).dropped += 1;
            self.record_drop(id, Some(f.packet), t, DropReason::QueueFull { link: link_id });
            return;
        }

        let len = self.flights[&id].packet.len() as u128;
        let serialization = Nanos((len * 8 * 1_000_000_000).div_ceil(rate as u128) as u64);
        let start = t.max(dir.busy_until);
        let done = start + serialization;
        dir.busy_until = done;
        dir.occupancy.push_back(done);

        let sample = delay.sample(&mut self.rng);
        let DelaySample::Finite(ms) = sample else {
            let f = self.flights.remove(&id).expect("flight exists");
            self.counters.lost += 1;
            self.area_mut(area).lost += 1;
            self.record_drop(id, Some(f.packet), t, DropReason::Lost { link: link_id });
            return;
        };
        let dir = &mut self.dirs[link_id][self.topo.link(link_id).direction_from(at)];
        let sampled_delay = Nanos::from_millis_f64(ms);
        let natural = done + sampled_delay;
        let fifo_hold = dir.last_arrival.saturating_sub(natural);
        let arrival = natural + fifo_hold;
        dir.last_arrival = arrival;

        let f = self.flights.get_mut(&id).expect("flight exists");
        f.hops.push(HopRecord {
            link: link_id,
            from: at,
            to: next,
            at: t,
            queue_wait: start - t,
            serialization,
            sampled_delay,
            fifo_hold,
        });
        f.at = next;
        self.schedule(arrival, id);
    }
}
