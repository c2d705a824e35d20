#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use gridloop::control::{Command, Event};
use gridloop::runner::{RunOptions, Session};
use gridloop::scenario::{ScenarioSpec, VifSimMode};
use gridloop_core::netsim::DeliveryRecord;
use gridloop_core::packet::IcmpKind;
use gridloop_core::Nanos;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

pub fn scenario(name: &str) -> ScenarioSpec {
    ScenarioSpec::load(&scenario_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// One client and one server in a dedicated subnet; no periodic pings.
pub fn echo_pair(seed: u64, prestart: u32) -> ScenarioSpec {
    let text = format!(
        r#"
seed = {seed}
duration_ms = 1000

[[subnets]]
name = "lan"
area = "dedicated"
index = 0
routers = ["r0"]
hosts = ["h1", "h2"]

[[apps]]
name = "client"
node = "h1"
role = "client"
peer = "server"
prestart_pings = {prestart}

[[apps]]
name = "server"
node = "h2"
role = "server"
"#
    );
    ScenarioSpec::from_toml(&text).unwrap()
}

pub fn take_log(s: &mut Session) -> Vec<DeliveryRecord> {
    s.ict().unwrap().net_mut().take_deliveries()
}

/// Step until `app` reports an event matching `want`.
pub fn step_until(s: &mut Session, app: &str, limit_ms: u64, want: impl Fn(&Event) -> bool) -> Result<Event, String> {
    let end = s.now().as_millis() + limit_ms;
    while s.now().as_millis() < end {
        s.step().map_err(|e| e.to_string())?;
        for e in s.apps().take_events() {
            if e.app == app {
                if let Some(ev) = Event::from_value(&e.event) {
                    if want(&ev) {
                        return Ok(ev);
                    }
                }
            }
        }
    }
    Err(format!("{app}: no matching event within {limit_ms} ms"))
}

/// Closes the session and insists on a datagram-only tunnel and a clean
/// shutdown.
pub fn finish(mut s: Session) -> Result<(), String> {
    let dg = s.datagram_check();
    let report = s.finish();
    if !dg.ok() {
        return Err(format!("tunnel check: {dg:?}"));
    }
    if !report.clean() {
        return Err(format!("unclean shutdown: {:?} {:?}", report.orphans, report.stop_failures));
    }
    Ok(())
}

fn ser_ns(len: usize, rate_bps: u64) -> u64 {
    (len as u64 * 8 * 1_000_000_000).div_ceil(rate_bps)
}

/// Sequential single pings through loopback vifs in the dedicated area.
/// Every reply must carry the request payload unchanged, nothing may be
/// lost, and the logged round trip must equal the sampled per-hop delays
/// plus serialization of both packets.
pub fn echo_exact(pings: u32) -> Result<String, String> {
    let started = Instant::now();
    let spec = echo_pair(11, 0);
    let mut s = Session::start(&spec, &RunOptions::default()).map_err(|e| e.to_string())?;
    let client = s.wiring().iter().find(|w| w.app == "client").unwrap().ip;
    let server = s.wiring().iter().find(|w| w.app == "server").unwrap().ip;
    let topo = s.ict().unwrap().net().topology().clone();
    let mut worst = Nanos(0);
    for r in 1..=pings {
        take_log(&mut s);
        s.apps().command("client", Command::Ping { repeat: r, count: 1, timeout_ms: 5000 });
        let done = step_until(&mut s, "client", 6000, |e| matches!(e, Event::PingDone { repeat, .. } if *repeat == r))?;
        match done {
            Event::PingDone { sent: 1, replies: 1, corrupt: 0, .. } => {}
            other => return Err(format!("repeat {r}: {other:?}")),
        }
        let log = take_log(&mut s);
        if log.len() != 2 {
            return Err(format!("repeat {r}: {} deliveries", log.len()));
        }
        let (req, rep) = (&log[0], &log[1]);
        let (q, a) = (req.packet.icmp_echo().ok_or("request is not an echo")?, rep.packet.icmp_echo().ok_or("reply is not an echo")?);
        if q.kind != IcmpKind::EchoRequest || a.kind != IcmpKind::EchoReply || q.seq != a.seq || q.ident != a.ident {
            return Err(format!("repeat {r}: unexpected echo pair {q:?} / {a:?}"));
        }
        if req.packet.src() != client || req.packet.dst() != server || rep.packet.src() != server || rep.packet.dst() != client {
            return Err(format!("repeat {r}: wrong endpoints"));
        }
        if q.data.is_empty() || q.data != a.data {
            return Err(format!("repeat {r}: payload changed"));
        }
        let mut expect = 0u64;
        for d in [req, rep] {
            for h in &d.hops {
                let ser = ser_ns(d.packet.len(), topo.link(h.link).data_rate_bps);
                if h.serialization != Nanos(ser) || h.queue_wait != Nanos(0) || h.fifo_hold != Nanos(0) {
                    return Err(format!("repeat {r}: hop {h:?}, serialization should be {ser}"));
                }
                if h.sampled_delay < Nanos(10_000_000) {
                    return Err(format!("repeat {r}: sampled delay {h:?} below the dedicated base"));
                }
                expect += h.sampled_delay.0 + ser;
            }
        }
        let rtt = req.transit() + rep.transit();
        if rtt != Nanos(expect) {
            return Err(format!("repeat {r}: rtt {rtt:?} != {expect} ns"));
        }
        let reported = gridloop::bench::echo_rtts(&log, client, server, &[q.seq]);
        if reported != vec![Some(Nanos(expect).as_millis_f64())] {
            return Err(format!("repeat {r}: measured {reported:?}"));
        }
        worst = worst.max(rtt);
    }
    let c = s.ict().unwrap().net().counters();
    if c.dropped() != 0 || !c.conserved() || c.delivered != 2 * u64::from(pings) {
        return Err(format!("counters {c:?}"));
    }
    finish(s)?;
    let took = started.elapsed();
    if took > Duration::from_secs(30) {
        return Err(format!("took {took:?}"));
    }
    Ok(format!("{pings} echoes exact, worst rtt {:.3} ms, {took:.2?}", worst.as_millis_f64()))
}

/// Start-up pings written by the app while its vif-sim is not yet running.
pub fn prestart(count: u32) -> Result<String, String> {
    let spec = echo_pair(5, count);
    let opts = RunOptions { vifsim_delay: Duration::from_secs(2), ..RunOptions::default() };
    let mut s = Session::start(&spec, &opts).map_err(|e| e.to_string())?;
    let done = step_until(&mut s, "client", 5000, |e| matches!(e, Event::PingDone { repeat: 0, .. }))?;
    let log = take_log(&mut s);
    let requests = log.iter().filter(|d| matches!(d.packet.icmp_echo(), Some(e) if e.kind == IcmpKind::EchoRequest)).count();
    let c = s.ict().unwrap().net().counters();
    finish(s)?;
    match done {
        Event::PingDone { sent, replies, corrupt: 0, .. } if sent == count && replies == count && requests == count as usize && c.dropped() == 0 => {
            Ok(format!("{count} early requests answered after a 2 s vif-sim delay"))
        }
        other => Err(format!("{other:?}, {requests} requests logged, counters {c:?}")),
    }
}

/// Sessions in both vif-sim modes; the vifs may only hold UDP sockets and
/// the vif-sims only their kernel connection. Each vif-sim is polled once
/// per step.
pub fn datagram_only() -> Result<String, String> {
    let mut notes = Vec::new();
    for mode in [VifSimMode::PerContainer, VifSimMode::Mux] {
        let spec = scenario("echo.toml");
        let opts = RunOptions { mode: Some(mode), ..RunOptions::default() };
        let mut s = Session::start(&spec, &opts).map_err(|e| e.to_string())?;
        s.run_until(gridloop_core::SimTime::from_millis(300)).map_err(|e| e.to_string())?;
        let dg = s.datagram_check();
        let names: BTreeSet<String> = s.wiring().iter().map(|w| w.vifsim.clone()).collect();
        let run = s.world().report();
        let report = s.finish();
        if !dg.ok() || dg.vifs_checked != 2 || dg.vifsims_checked != names.len() {
            return Err(format!("{}: {dg:?}", mode.as_str()));
        }
        for n in &names {
            let st = run.sims.get(n).ok_or_else(|| format!("no stats for {n}"))?;
            if st.polls != run.steps || st.steps != run.steps {
                return Err(format!("{n}: {} polls, {} steps, world {} steps", st.polls, st.steps, run.steps));
            }
        }
        if !report.clean() {
            return Err(format!("{}: unclean shutdown {:?}", mode.as_str(), report.orphans));
        }
        notes.push(format!("{}: {} vifs, {} vif-sims, {} UDP sockets", mode.as_str(), dg.vifs_checked, dg.vifsims_checked, dg.udp_sockets));
    }
    Ok(notes.join("; "))
}

/// The sweep scenario cut down to two pair counts and three repeats.
pub fn small_sweep(seed: u64) -> ScenarioSpec {
    let mut spec = scenario("sweep.toml");
    spec.seed = Some(seed);
    for m in &mut spec.measurements {
        m.node_counts = vec![1, 3];
        m.repeats = 3;
    }
    spec
}

fn written_csv(spec: &ScenarioSpec) -> Result<String, String> {
    let rep = gridloop::bench::run_scenario(spec, &RunOptions::default()).map_err(|e| e.to_string())?;
    if let Some(c) = rep.checks.iter().find(|c| !c.ok) {
        return Err(format!("{}: {}", c.name, c.detail));
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    gridloop::output::emit(&rep, dir.path()).map_err(|e| e.to_string())?;
    std::fs::read_to_string(dir.path().join("report.csv")).map_err(|e| e.to_string())
}

/// Two runs of the same scenario and seed write byte-identical CSV.
pub fn reproducible() -> Result<String, String> {
    let a = written_csv(&small_sweep(99))?;
    let b = written_csv(&small_sweep(99))?;
    if a != b {
        return Err(format!("runs differ:\n{a}\n---\n{b}"));
    }
    let rows = a.lines().count() - 1;
    if rows != 12 {
        return Err(format!("{rows} rows"));
    }
    Ok(format!("{rows} rows, {} bytes identical", a.len()))
}
