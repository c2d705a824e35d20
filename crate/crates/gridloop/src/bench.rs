//! Measurement jobs. Ping round trips and bulk throughput are read from the
//! network's delivery log, so they are in simulated time and do not depend
//! on how fast the host runs the apps.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::{IpAddr, Ipv4Addr};
use std::time::Instant;

use gridloop_core::netsim::{DeliveryRecord, Topology};
use gridloop_core::packet::IcmpKind;
use gridloop_core::SimTime;
use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::appsim::AppEvent;
use crate::control::{Command, Event};
use crate::output::quantize;
use crate::runner::{RunError, RunOptions, Session, SessionReport};
use crate::scenario::{MeasurementKind, MeasurementSpec, ScenarioSpec};
use crate::testapp::{parse_segment, ping_seq, segment_count, BULK_DST_PORT, BULK_SRC_PORT};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("{what}: no result by t={t} ms")]
    Stalled { what: String, t: u64 },
    #[error("interrupted at t={t} ms")]
    Interrupted { t: u64 },
}

impl From<gridloop_core::kernel::RunAborted> for BenchError {
    fn from(e: gridloop_core::kernel::RunAborted) -> Self {
        BenchError::Run(RunError::Aborted(e))
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub measurement: MeasurementKind,
    pub node_count: u32,
    pub repeat: u32,
    pub value: f64,
}

/// Outcome of every (pair, repeat) of one measurement at one node count.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Tally {
    pub measurement: Option<MeasurementKind>,
    pub node_count: u32,
    pub expected: u64,
    pub ok: u64,
    /// Pings without any reply.
    pub lost: u64,
    /// Stalled or corrupted transfers.
    pub failed: u64,
    pub pings_lost: u64,
}

impl Tally {
    pub fn balanced(&self) -> bool {
        self.ok + self.lost + self.failed == self.expected
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Check {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AreaTotals {
    pub delivered: u64,
    pub lost: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionSummary {
    pub label: String,
    pub sim_ms: u64,
    pub wall_ms: f64,
    pub steps: u64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct BenchReport {
    pub seed: u64,
    pub mode: String,
    pub samples: Vec<Sample>,
    pub tallies: Vec<Tally>,
    pub areas: BTreeMap<String, AreaTotals>,
    pub sessions: Vec<SessionSummary>,
    /// Events of runs without measurements.
    pub events: Vec<AppEvent>,
    pub sim_ms: u64,
    pub wall_ms: f64,
    pub checks: Vec<Check>,
}

impl BenchReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }

    pub fn wall_ms_per_sim_ms(&self) -> f64 {
        if self.sim_ms == 0 {
            0.0
        } else {
            self.wall_ms / self.sim_ms as f64
        }
    }

    fn check(&mut self, name: impl Into<String>, ok: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), ok, detail: detail.into() });
    }

    fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.ok).count()
    }
}

#[derive(Debug, Clone)]
struct Pair {
    client: String,
    server: String,
    client_ip: Ipv4Addr,
    server_ip: Ipv4Addr,
}

fn pairs_of(s: &Session, names: &[(String, String)]) -> Vec<Pair> {
    let ip = |app: &str| s.wiring().iter().find(|w| w.app == app).map(|w| w.ip).expect("validated pair has a node");
    names
        .iter()
        .map(|(c, v)| Pair { client: c.clone(), server: v.clone(), client_ip: ip(c), server_ip: ip(v) })
        .collect()
}

fn v4(a: IpAddr) -> Option<Ipv4Addr> {
    match a {
        IpAddr::V4(x) => Some(x),
        IpAddr::V6(_) => None,
    }
}

fn ms(n: gridloop_core::Nanos) -> f64 {
    n.as_millis_f64()
}

/// Step until every client reported an event matching `want`. Other events
/// are returned as well.
fn wait_for(
    s: &mut Session,
    clients: &BTreeSet<&str>,
    limit_ms: u64,
    what: &str,
    want: impl Fn(&Event) -> bool,
) -> Result<(BTreeMap<String, Event>, Vec<AppEvent>), BenchError> {
    let deadline = s.now().as_millis().saturating_add(limit_ms);
    let mut got = BTreeMap::new();
    let mut other = Vec::new();
    while got.len() < clients.len() {
        if s.now().as_millis() >= deadline {
            return Err(BenchError::Stalled { what: what.to_string(), t: s.now().as_millis() });
        }
        interrupted(s)?;
        s.step()?;
        for e in s.apps().take_events() {
            match Event::from_value(&e.event) {
                Some(ev) if clients.contains(e.app.as_str()) && want(&ev) => {
                    got.insert(e.app.clone(), ev);
                }
                _ => other.push(e),
            }
        }
    }
    Ok((got, other))
}

fn interrupted(s: &Session) -> Result<(), BenchError> {
    if crate::signals::stop_requested() {
        return Err(BenchError::Interrupted { t: s.now().as_millis() });
    }
    Ok(())
}

fn take_log(s: &mut Session) -> Vec<DeliveryRecord> {
    s.ict().map(|ict| ict.net_mut().take_deliveries()).unwrap_or_default()
}

/// Network round trip of each echo: request transit plus reply transit.
pub fn echo_rtts(log: &[DeliveryRecord], client: Ipv4Addr, server: Ipv4Addr, seqs: &[u16]) -> Vec<Option<f64>> {
    let mut req = HashMap::new();
    let mut rep = HashMap::new();
    for d in log {
        let (Some(src), Some(dst)) = (v4(d.packet.src()), v4(d.packet.dst())) else { continue };
        let Some(e) = d.packet.icmp_echo() else { continue };
        match e.kind {
            IcmpKind::EchoRequest if (src, dst) == (client, server) => {
                req.entry(e.seq).or_insert(d.transit());
            }
            IcmpKind::EchoReply if (src, dst) == (server, client) => {
                rep.entry(e.seq).or_insert(d.transit());
            }
            _ => {}
        }
    }
    seqs.iter().map(|q| Some(ms(*req.get(q)? + *rep.get(q)?))).collect()
}

/// Goodput of one transfer in kB/s: bytes over the time from the first
/// segment entering the network to the last segment completing the
/// in-order sequence at the receiver.
pub fn bulk_throughput(log: &[DeliveryRecord], client: Ipv4Addr, server: Ipv4Addr, repeat: u32, bytes: u64) -> Option<f64> {
    let segments = segment_count(bytes as u32);
    let mut data: Vec<(&DeliveryRecord, u32)> = log
        .iter()
        .filter(|d| v4(d.packet.src()) == Some(client) && v4(d.packet.dst()) == Some(server))
        .filter_map(|d| {
            let u = d.packet.udp()?;
            if (u.src_port, u.dst_port) != (BULK_SRC_PORT, BULK_DST_PORT) {
                return None;
            }
            let (r, seq, _, _) = parse_segment(u.data)?;
            (r == repeat).then_some((d, seq))
        })
        .collect();
    data.sort_by_key(|(d, _)| (d.arrival, d.packet_id));
    let start = data.iter().map(|(d, _)| d.ingress).min()?;
    let mut next = 0;
    for (d, seq) in &data {
        if *seq == next {
            next += 1;
            if next == segments {
                let secs = (d.arrival - start).0 as f64 / 1e9;
                return (secs > 0.0).then(|| bytes as f64 / secs / 1000.0);
            }
        }
    }
    None
}

/// Lowest link rate on the route between two hosts, in kB/s.
pub fn path_capacity_kbs(topo: &Topology, a: Ipv4Addr, b: Ipv4Addr) -> Option<f64> {
    let route = topo.route(IpAddr::V4(a), IpAddr::V4(b)).ok()?;
    route
        .windows(2)
        .filter_map(|w| topo.neighbours(w[0]).iter().find(|(n, _)| *n == w[1]).map(|(_, l)| topo.link(*l).data_rate_bps))
        .min()
        .map(|bps| bps as f64 / 8.0 / 1000.0)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn rtt_job(s: &mut Session, m: &MeasurementSpec, node_count: u32, pairs: &[Pair], rep: &mut BenchReport) -> Result<(), BenchError> {
    let clients: BTreeSet<&str> = pairs.iter().map(|p| p.client.as_str()).collect();
    let mut tally = Tally { measurement: Some(m.kind), node_count, expected: u64::from(m.repeats) * pairs.len() as u64, ..Tally::default() };
    let mut disagree = Vec::new();
    for r in 1..=m.repeats {
        take_log(s);
        for p in pairs {
            s.apps().command(&p.client, Command::Ping { repeat: r, count: m.pings_per_repeat, timeout_ms: m.timeout_ms });
        }
        let (done, _) = wait_for(s, &clients, m.timeout_ms + 1000, &format!("rtt repeat {r}"), |e| {
            matches!(e, Event::PingDone { repeat, .. } if *repeat == r)
        })?;
        let log = take_log(s);
        let seqs: Vec<u16> = (0..m.pings_per_repeat).map(|k| ping_seq(r, m.pings_per_repeat, k)).collect();
        let mut per_pair = Vec::new();
        for p in pairs {
            let rtts: Vec<f64> = echo_rtts(&log, p.client_ip, p.server_ip, &seqs).into_iter().flatten().collect();
            tally.pings_lost += (seqs.len() - rtts.len()) as u64;
            if let Some(Event::PingDone { replies, corrupt, .. }) = done.get(&p.client) {
                if *replies as usize != rtts.len() || *corrupt > 0 {
                    disagree.push(format!("{} repeat {r}: app saw {replies} good, {corrupt} corrupt; log has {}", p.client, rtts.len()));
                }
            }
            if rtts.is_empty() {
                tally.lost += 1;
            } else {
                tally.ok += 1;
                per_pair.push(mean(&rtts));
            }
        }
        if !per_pair.is_empty() {
            rep.samples.push(Sample { measurement: m.kind, node_count, repeat: r, value: quantize(mean(&per_pair)) });
        }
    }
    rep.check(format!("rtt/{node_count}: replies intact and logged"), disagree.is_empty(), disagree.join("; "));
    rep.tallies.push(tally);
    Ok(())
}

fn bulk_job(s: &mut Session, m: &MeasurementSpec, node_count: u32, pairs: &[Pair], rep: &mut BenchReport) -> Result<(), BenchError> {
    let clients: BTreeSet<&str> = pairs.iter().map(|p| p.client.as_str()).collect();
    let mut tally = Tally { measurement: Some(m.kind), node_count, expected: u64::from(m.repeats) * pairs.len() as u64, ..Tally::default() };
    let limit = (u64::from(segment_count(m.bytes_total as u32)) + 1).saturating_mul(m.timeout_ms);
    let capacity: BTreeMap<&str, f64> = {
        let topo = s.ict().map(|i| i.net().topology().clone());
        pairs
            .iter()
            .filter_map(|p| Some((p.client.as_str(), path_capacity_kbs(topo.as_ref()?, p.client_ip, p.server_ip)?)))
            .collect()
    };
    let mut problems = Vec::new();
    let mut over = Vec::new();
    for r in 1..=m.repeats {
        take_log(s);
        for p in pairs {
            let cmd = Command::Bulk { repeat: r, bytes: m.bytes_total as u32, window: m.window, timeout_ms: m.timeout_ms, rto_ms: m.rto_ms };
            s.apps().command(&p.client, cmd);
        }
        let (done, other) = wait_for(s, &clients, limit, &format!("bulk repeat {r}"), |e| {
            matches!(e, Event::BulkDone { repeat, .. } if *repeat == r)
        })?;
        let log = take_log(s);
        let corrupted: BTreeSet<&str> = other
            .iter()
            .filter(|e| matches!(Event::from_value(&e.event), Some(Event::BulkCorrupt { repeat, .. }) if repeat == r))
            .map(|e| e.app.as_str())
            .collect();
        let mut per_pair = Vec::new();
        for p in pairs {
            let ok = matches!(done.get(&p.client), Some(Event::BulkDone { ok: true, .. }));
            let value = bulk_throughput(&log, p.client_ip, p.server_ip, r, m.bytes_total);
            if corrupted.contains(p.server.as_str()) {
                problems.push(format!("{} repeat {r}: corrupted segments", p.server));
                tally.failed += 1;
                continue;
            }
            match (ok, value) {
                (true, Some(v)) => {
                    tally.ok += 1;
                    if capacity.get(p.client.as_str()).is_some_and(|c| v > *c) {
                        over.push(format!("{} repeat {r}: {v:.3} kB/s", p.client));
                    }
                    per_pair.push(v);
                }
                (false, _) => tally.failed += 1,
                (true, None) => {
                    problems.push(format!("{} repeat {r}: done but transfer not in the log", p.client));
                    tally.failed += 1;
                }
            }
        }
        if !per_pair.is_empty() {
            rep.samples.push(Sample { measurement: m.kind, node_count, repeat: r, value: quantize(mean(&per_pair)) });
        }
    }
    rep.check(format!("bulk/{node_count}: payload intact and logged"), problems.is_empty(), problems.join("; "));
    rep.check(format!("bulk/{node_count}: within path capacity"), over.is_empty(), over.join("; "));
    rep.tallies.push(tally);
    Ok(())
}

fn close(label: &str, mut s: Session, rep: &mut BenchReport) -> SessionReport {
    if !s.wiring().is_empty() {
        let dg = s.datagram_check();
        let dg_detail = if dg.ok() { String::new() } else { dg.violations.join("; ") };
        rep.check(format!("{label}: datagram-only tunnel"), dg.ok(), dg_detail);
    }
    if let Some(ict) = s.ict() {
        let c = ict.net().counters();
        rep.check(format!("{label}: packet conservation"), c.conserved(), format!("{c:?}"));
        for (area, a) in ict.net().area_counters() {
            let t = rep.areas.entry(area.to_string()).or_default();
            t.delivered += a.delivered;
            t.lost += a.lost;
            t.dropped += a.dropped;
        }
    }
    let sr = s.finish();
    let mut detail = sr.orphans.clone();
    detail.extend(sr.stop_failures.iter().cloned());
    rep.check(format!("{label}: clean shutdown"), sr.clean(), detail.join("; "));
    rep.sim_ms += sr.run.now.as_millis();
    rep.wall_ms += sr.wall_ms;
    rep.sessions.push(SessionSummary { label: label.to_string(), sim_ms: sr.run.now.as_millis(), wall_ms: sr.wall_ms, steps: sr.run.steps });
    sr
}

fn measure(s: &mut Session, m: &MeasurementSpec, node_count: u32, names: &[(String, String)], rep: &mut BenchReport) -> Result<(), BenchError> {
    let pairs = pairs_of(s, names);
    match m.kind {
        MeasurementKind::Rtt => rtt_job(s, m, node_count, &pairs, rep),
        MeasurementKind::BulkThroughput => bulk_job(s, m, node_count, &pairs, rep),
    }
}

fn session_run(
    spec: &ScenarioSpec,
    opts: &RunOptions,
    label: &str,
    rep: &mut BenchReport,
    body: impl FnOnce(&mut Session, &mut BenchReport) -> Result<(), BenchError>,
) -> Result<(), BenchError> {
    let started = Instant::now();
    let mut s = Session::start(spec, opts)?;
    let res = body(&mut s, rep);
    close(label, s, rep);
    info!("{label}: {:?}", started.elapsed());
    res
}

/// Run every measurement of the scenario, or the plain scenario for its
/// duration when it declares none.
pub fn run_scenario(spec: &ScenarioSpec, opts: &RunOptions) -> Result<BenchReport, BenchError> {
    spec.check().map_err(RunError::from)?;
    let mut rep = BenchReport {
        seed: spec.seed(),
        mode: opts.mode.unwrap_or(spec.mode).as_str().to_string(),
        ..BenchReport::default()
    };
    if spec.measurements.is_empty() {
        let until = SimTime::from_millis(spec.duration_ms);
        session_run(spec, opts, "run", &mut rep, |s, rep| {
            while s.now() < until {
                interrupted(s)?;
                s.step()?;
            }
            rep.events = s.apps().take_events();
            Ok(())
        })?;
    }
    for (i, m) in spec.measurements.iter().enumerate() {
        if m.generated() {
            for &n in &m.node_counts {
                let sub = spec.with_generated_pairs(m, n);
                let names: Vec<(String, String)> = (0..n).map(|k| (format!("client-{k}"), format!("server-{k}"))).collect();
                let label = format!("{}#{}/{n}", m.kind, i + 1);
                session_run(&sub, opts, &label, &mut rep, |s, rep| measure(s, m, n, &names, rep))?;
            }
        } else {
            let n = m.pairs.len() as u32;
            let mut plain = spec.clone();
            plain.measurements.clear();
            let label = format!("{}#{}", m.kind, i + 1);
            session_run(&plain, opts, &label, &mut rep, |s, rep| measure(s, m, n, &m.pairs, rep))?;
        }
    }
    let unbalanced: Vec<String> = rep
        .tallies
        .iter()
        .filter(|t| !t.balanced())
        .map(|t| format!("{:?}/{}: {} + {} + {} != {}", t.measurement, t.node_count, t.ok, t.lost, t.failed, t.expected))
        .collect();
    rep.check("sample accounting", unbalanced.is_empty(), unbalanced.join("; "));
    info!("{} checks, {} failed", rep.checks.len(), rep.failures());
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gridloop_core::netsim::HopRecord;
    use gridloop_core::packet::{icmp_echo, ipv4_udp};
    use gridloop_core::packet::Packet;
    use gridloop_core::Nanos;

    const C: Ipv4Addr = Ipv4Addr::new(10, 64, 0, 2);
    const S: Ipv4Addr = Ipv4Addr::new(10, 64, 1, 2);

    fn rec(id: u64, packet: Packet, ingress: u64, arrival: u64) -> DeliveryRecord {
        DeliveryRecord {
            packet_id: id,
            packet,
            src: 0,
            dst: 1,
            ingress: Nanos(ingress),
            arrival: Nanos(arrival),
            hops: vec![HopRecord {
                link: 0,
                from: 0,
                to: 1,
                at: Nanos(ingress),
                queue_wait: Nanos(0),
                serialization: Nanos(0),
                sampled_delay: Nanos(arrival - ingress),
                fifo_hold: Nanos(0),
            }],
        }
    }

    fn segment(repeat: u32, seq: u32, total: u32) -> Packet {
        let mut d = repeat.to_be_bytes().to_vec();
        d.extend_from_slice(&seq.to_be_bytes());
        d.extend_from_slice(&total.to_be_bytes());
        d.extend_from_slice(&[0; 100]);
        ipv4_udp(C, S, BULK_SRC_PORT, BULK_DST_PORT, &d)
    }

    #[test]
    fn rtt_adds_both_directions() {
        let log = vec![
            rec(1, icmp_echo(C, S, IcmpKind::EchoRequest, 1, 7, &[]), 0, 3_000_000),
            rec(2, icmp_echo(S, C, IcmpKind::EchoReply, 1, 7, &[]), 4_000_000, 6_500_000),
            rec(3, icmp_echo(C, S, IcmpKind::EchoRequest, 1, 8, &[]), 0, 1_000_000),
        ];
        assert_eq!(echo_rtts(&log, C, S, &[7, 8]), vec![Some(5.5), None]);
    }

    #[test]
    fn throughput_waits_for_in_order_completion() {
        // Segment 1 first arrives before 0 and is only counted on its retransmission.
        let bytes = 2 * 1400 + 10;
        let log = vec![
            rec(1, segment(1, 1, 3), 0, 2_000_000),
            rec(2, segment(1, 0, 3), 0, 3_000_000),
            rec(3, segment(1, 2, 3), 0, 4_000_000),
            rec(4, segment(1, 1, 3), 5_000_000, 8_000_000),
            rec(5, segment(1, 2, 3), 5_000_000, 10_000_000),
            rec(6, segment(2, 0, 3), 0, 1_000_000),
        ];
        let v = bulk_throughput(&log, C, S, 1, bytes).unwrap();
        assert!((v - bytes as f64 / 0.010 / 1000.0).abs() < 1e-9, "{v}");
        assert_eq!(bulk_throughput(&log[..4], C, S, 1, bytes), None);
        assert_eq!(bulk_throughput(&log, C, S, 3, bytes), None);
    }

    #[test]
    fn tally_balance() {
        let t = Tally { expected: 6, ok: 4, lost: 1, failed: 1, ..Tally::default() };
        assert!(t.balanced());
        assert!(!Tally { ok: 5, ..t }.balanced());
    }
}
