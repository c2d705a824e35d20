//! Bundled deterministic test apps.
//!
//! The app sees raw IPv4 packets on its device socket and only acts when
//! ticked over the control channel, so a run depends on nothing but the
//! kernel's step order.
//!
//! * client: echo requests and go-back-N bulk transfers on command.
//! * server / stubborn: echo replies and one cumulative bulk ack per flow
//!   and tick. Stubborn ignores SIGTERM.
//! * droop: `p_kw = 200 * (v_pu - 1)`, clamped to +-50, sent whenever the
//!   voltage reading changes.
//!
//! Bulk segments are UDP from port 40000 to port 50000 carrying
//! `[repeat u32][seq u32][total u32]` and up to 1400 payload bytes. Acks go
//! back to port 40000 as `[repeat u32][next expected seq u32]`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufRead, Write};
use std::net::{IpAddr, Ipv4Addr, SocketAddr, UdpSocket};

use gridloop_core::packet::{icmp_echo, ipv4_udp, IcmpKind, Packet};

use crate::control::{Command, Event, Reply, Tick, Values};
use crate::scenario::Role;

pub const BULK_SRC_PORT: u16 = 40_000;
pub const BULK_DST_PORT: u16 = 50_000;
pub const SEGMENT_DATA: usize = 1400;
pub const SEGMENT_HEADER: usize = 12;
pub const PING_DATA: usize = 56;
pub const DROOP_GAIN: f64 = 200.0;
pub const DROOP_LIMIT_KW: f64 = 50.0;

/// The droop controller's published rule.
pub fn droop_kw(v_pu: f64) -> f64 {
    (DROOP_GAIN * (v_pu - 1.0)).clamp(-DROOP_LIMIT_KW, DROOP_LIMIT_KW)
}

/// Echo payload for `(ident, seq)`; replies are checked against it.
pub fn ping_payload(ident: u16, seq: u16) -> Vec<u8> {
    (0..PING_DATA).map(|k| (ident as usize * 7 + seq as usize * 13 + k) as u8).collect()
}

pub fn segment_payload(repeat: u32, seq: u32, len: usize) -> Vec<u8> {
    (0..len).map(|k| (seq as usize * 31 + k * 7 + repeat as usize) as u8).collect()
}

pub fn segment_count(bytes: u32) -> u32 {
    bytes.div_ceil(SEGMENT_DATA as u32)
}

fn segment_len(bytes: u32, seq: u32) -> usize {
    (bytes as usize - seq as usize * SEGMENT_DATA).min(SEGMENT_DATA)
}

/// Echo sequence number of ping `k` of `repeat`. Repeat 0 is the start-up
/// burst.
pub fn ping_seq(repeat: u32, count: u32, k: u32) -> u16 {
    (repeat.saturating_sub(1).wrapping_mul(count).wrapping_add(k)) as u16
}

fn word(data: &[u8], i: usize) -> u32 {
    u32::from_be_bytes(data[i..i + 4].try_into().expect("4 bytes"))
}

/// `(repeat, seq, total, payload)` of a bulk segment.
pub fn parse_segment(data: &[u8]) -> Option<(u32, u32, u32, &[u8])> {
    if data.len() < SEGMENT_HEADER {
        return None;
    }
    Some((word(data, 0), word(data, 4), word(data, 8), &data[SEGMENT_HEADER..]))
}

#[derive(Debug, Clone)]
pub struct AppConfig {
    pub role: Role,
    pub ident: u16,
    pub ip: Option<Ipv4Addr>,
    pub peer: Option<Ipv4Addr>,
    pub ping_every: Option<u64>,
    /// Echo requests sent at start-up, before any tick.
    pub prestart_pings: u32,
}

struct PingRun {
    repeat: u32,
    sent: u32,
    expected: BTreeSet<u16>,
    replies: u32,
    corrupt: u32,
    deadline: u64,
}

struct BulkRun {
    repeat: u32,
    bytes: u32,
    segments: u32,
    window: u32,
    base: u32,
    next: u32,
    last_progress: u64,
    timeout: u64,
    rto: u64,
    rto_mark: u64,
}

#[derive(Default)]
struct Flow {
    repeat: u32,
    next: u32,
    corrupt: u32,
}

/// Everything a test app does, minus the sockets.
pub struct AppState {
    cfg: AppConfig,
    ping: Option<PingRun>,
    bulk: Option<BulkRun>,
    flows: BTreeMap<(Ipv4Addr, u16), Flow>,
    next_auto: Option<u64>,
    auto_seq: u16,
    last_v: Option<f64>,
}

impl AppState {
    pub fn new(cfg: AppConfig) -> Self {
        AppState {
            ping: None,
            bulk: None,
            flows: BTreeMap::new(),
            next_auto: cfg.ping_every.map(|_| 0),
            auto_seq: 0,
            last_v: None,
            cfg,
        }
    }

    fn echo_request(&self, seq: u16) -> Option<Packet> {
        let (src, dst) = (self.cfg.ip?, self.cfg.peer?);
        Some(icmp_echo(src, dst, IcmpKind::EchoRequest, self.cfg.ident, seq, &ping_payload(self.cfg.ident, seq)))
    }

    /// Packets to send before the first tick.
    pub fn start(&mut self) -> Vec<Packet> {
        let n = self.cfg.prestart_pings;
        if n == 0 || self.cfg.role != Role::Client {
            return Vec::new();
        }
        self.start_pings(0, n, u64::MAX)
    }

    fn start_pings(&mut self, repeat: u32, count: u32, deadline: u64) -> Vec<Packet> {
        let mut run = PingRun { repeat, sent: 0, expected: BTreeSet::new(), replies: 0, corrupt: 0, deadline };
        let mut out = Vec::new();
        for k in 0..count {
            let seq = ping_seq(repeat, count, k);
            if let Some(p) = self.echo_request(seq) {
                run.expected.insert(seq);
                run.sent += 1;
                out.push(p);
            }
        }
        self.ping = Some(run);
        out
    }

    pub fn on_tick(&mut self, tick: &Tick, inbound: &[Packet]) -> (Vec<Packet>, Reply) {
        let t = tick.t;
        let mut out = Vec::new();
        let mut reply = Reply::default();
        let mut acks = BTreeSet::new();
        for p in inbound {
            self.on_packet(t, p, &mut out, &mut reply, &mut acks);
        }
        self.send_acks(&acks, &mut out, &mut reply);
        for c in &tick.commands {
            match *c {
                Command::Ping { repeat, count, timeout_ms } => {
                    out.extend(self.start_pings(repeat, count, t.saturating_add(timeout_ms)));
                }
                Command::Bulk { repeat, bytes, window, timeout_ms, rto_ms } => {
                    self.bulk = Some(BulkRun {
                        repeat,
                        bytes,
                        segments: segment_count(bytes),
                        window: window.max(1),
                        base: 0,
                        next: 0,
                        last_progress: t,
                        timeout: timeout_ms,
                        rto: rto_ms.max(1),
                        rto_mark: t,
                    });
                }
            }
        }
        if self.cfg.role == Role::Droop {
            if let Some(&v) = tick.readings.get("v_pu") {
                if self.last_v != Some(v) {
                    self.last_v = Some(v);
                    reply.setpoints = Values::from([("p_kw".to_string(), droop_kw(v))]);
                }
            }
        }
        self.timers(t, &mut out, &mut reply);
        (out, reply)
    }

    fn on_packet(&mut self, t: u64, p: &Packet, out: &mut Vec<Packet>, reply: &mut Reply, acks: &mut BTreeSet<(Ipv4Addr, u16)>) {
        let IpAddr::V4(src) = p.src() else { return };
        let serves = matches!(self.cfg.role, Role::Server | Role::Stubborn);
        if let Some(e) = p.icmp_echo() {
            match e.kind {
                IcmpKind::EchoRequest if serves => {
                    if let Some(me) = self.cfg.ip {
                        out.push(icmp_echo(me, src, IcmpKind::EchoReply, e.ident, e.seq, e.data));
                    }
                }
                IcmpKind::EchoReply if e.ident == self.cfg.ident => {
                    let ok = e.data == ping_payload(self.cfg.ident, e.seq).as_slice();
                    if let Some(run) = self.ping.as_mut().filter(|r| r.expected.contains(&e.seq)) {
                        run.expected.remove(&e.seq);
                        if ok {
                            run.replies += 1;
                        } else {
                            run.corrupt += 1;
                        }
                    } else if self.cfg.ping_every.is_some() {
                        reply.events.push(Event::Echo { seq: e.seq, ok }.to_value());
                    }
                }
                _ => {}
            }
            return;
        }
        let Some(u) = p.udp() else { return };
        if serves && u.dst_port == BULK_DST_PORT {
            let Some((repeat, seq, _total, data)) = parse_segment(u.data) else { return };
            let flow = self.flows.entry((src, u.src_port)).or_default();
            if flow.repeat != repeat {
                *flow = Flow { repeat, next: 0, corrupt: 0 };
            }
            if seq == flow.next {
                if data != segment_payload(repeat, seq, data.len()).as_slice() {
                    flow.corrupt += 1;
                }
                flow.next += 1;
            }
            acks.insert((src, u.src_port));
        } else if self.cfg.role == Role::Client && u.dst_port == BULK_SRC_PORT && u.data.len() >= 8 {
            let (repeat, acked) = (word(u.data, 0), word(u.data, 4));
            if let Some(b) = self.bulk.as_mut() {
                if b.repeat == repeat && acked > b.base && acked <= b.segments {
                    b.base = acked;
                    b.next = b.next.max(acked);
                    b.last_progress = t;
                    b.rto_mark = t;
                }
            }
        }
    }

    fn send_acks(&mut self, acks: &BTreeSet<(Ipv4Addr, u16)>, out: &mut Vec<Packet>, reply: &mut Reply) {
        let Some(me) = self.cfg.ip else { return };
        for key in acks {
            let flow = &mut self.flows.get_mut(key).expect("flow seen this tick");
            let mut data = flow.repeat.to_be_bytes().to_vec();
            data.extend_from_slice(&flow.next.to_be_bytes());
            out.push(ipv4_udp(me, key.0, BULK_DST_PORT, key.1, &data));
            if flow.corrupt > 0 {
                reply.events.push(Event::BulkCorrupt { repeat: flow.repeat, segments: flow.corrupt }.to_value());
                flow.corrupt = 0;
            }
        }
    }

    fn timers(&mut self, t: u64, out: &mut Vec<Packet>, reply: &mut Reply) {
        let mut wake: Vec<u64> = Vec::new();
        if let Some(run) = &self.ping {
            if run.expected.is_empty() || t >= run.deadline {
                let e = Event::PingDone { repeat: run.repeat, sent: run.sent, replies: run.replies, corrupt: run.corrupt };
                reply.events.push(e.to_value());
                self.ping = None;
            } else if run.deadline != u64::MAX {
                wake.push(run.deadline);
            }
        }
        if let Some(b) = self.bulk.as_mut() {
            if b.base >= b.segments || t.saturating_sub(b.last_progress) >= b.timeout {
                let ok = b.base >= b.segments;
                reply.events.push(Event::BulkDone { repeat: b.repeat, ok, acked: b.base }.to_value());
                self.bulk = None;
            } else {
                if t.saturating_sub(b.rto_mark) >= b.rto {
                    b.next = b.base;
                    b.rto_mark = t;
                }
                wake.push(b.rto_mark + b.rto);
                wake.push(b.last_progress + b.timeout);
            }
        }
        self.bulk_window(out);
        if let (Some(every), Some(due)) = (self.cfg.ping_every, self.next_auto) {
            if t >= due {
                if let Some(p) = self.echo_request(self.auto_seq) {
                    out.push(p);
                }
                self.auto_seq = self.auto_seq.wrapping_add(1);
                self.next_auto = Some(t + every);
            }
            wake.extend(self.next_auto);
        }
        reply.wake = wake.into_iter().filter(|&w| w > t).min();
    }

    fn bulk_window(&mut self, out: &mut Vec<Packet>) {
        let (Some(src), Some(dst)) = (self.cfg.ip, self.cfg.peer) else { return };
        let Some(b) = self.bulk.as_mut() else { return };
        while b.next < b.segments && b.next < b.base + b.window {
            let len = segment_len(b.bytes, b.next);
            let mut data = Vec::with_capacity(SEGMENT_HEADER + len);
            data.extend_from_slice(&b.repeat.to_be_bytes());
            data.extend_from_slice(&b.next.to_be_bytes());
            data.extend_from_slice(&b.segments.to_be_bytes());
            data.extend_from_slice(&segment_payload(b.repeat, b.next, len));
            out.push(ipv4_udp(src, dst, BULK_SRC_PORT, BULK_DST_PORT, &data));
            b.next += 1;
        }
    }
}

/// Where the app's raw packets go: the vif's device endpoint.
pub struct DeviceLink {
    sock: UdpSocket,
    vif: SocketAddr,
}

impl DeviceLink {
    pub fn open(bind: SocketAddr, vif: SocketAddr) -> io::Result<Self> {
        let sock = UdpSocket::bind(bind)?;
        sock.set_nonblocking(true)?;
        Ok(DeviceLink { sock, vif })
    }

    pub fn send(&self, packets: &[Packet]) -> io::Result<()> {
        for p in packets {
            match self.sock.send_to(p.bytes(), self.vif) {
                Ok(_) => {}
                // The vif may not be up yet; the app's own retries cover it.
                Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    pub fn drain(&self) -> io::Result<Vec<Packet>> {
        let mut buf = vec![0u8; 65_536];
        let mut out = Vec::new();
        loop {
            match self.sock.recv_from(&mut buf) {
                Ok((n, _)) => {
                    if let Ok(p) = Packet::parse(buf[..n].to_vec()) {
                        out.push(p);
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => return Ok(out),
                Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => continue,
                Err(e) => return Err(e),
            }
        }
    }
}

extern "C" fn exit_now(_: libc::c_int) {
    // SAFETY: _exit is async-signal-safe.
    unsafe { libc::_exit(0) }
}

/// Cooperative apps exit 0 on SIGTERM; stubborn ones ignore it.
pub fn install_term_handler(role: Role) {
    let handler = if role == Role::Stubborn { libc::SIG_IGN } else { exit_now as extern "C" fn(libc::c_int) as libc::sighandler_t };
    // SAFETY: installs a handler that only calls _exit, or ignores the signal.
    unsafe {
        libc::signal(libc::SIGTERM, handler);
    }
}

/// Serve ticks from `input` until it closes.
pub fn serve(mut state: AppState, device: Option<DeviceLink>, input: impl BufRead, mut output: impl Write) -> io::Result<()> {
    if let Some(d) = &device {
        d.send(&state.start())?;
    }
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tick: Tick = serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        let inbound = match &device {
            Some(d) => d.drain()?,
            None => Vec::new(),
        };
        let (packets, reply) = state.on_tick(&tick, &inbound);
        if let Some(d) = &device {
            d.send(&packets)?;
        }
        serde_json::to_writer(&mut output, &reply)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}
