//! The kernel-side adapter. Speaks the framed request/reply protocol to the
//! co-simulation kernel and plain datagrams to one or many vifs.
//!
//! Per-container mode serves a single entity and adopts whichever address
//! announces itself first. Mux mode serves many entities, each bound to the
//! container address given at `create`.
//!
//! Each entity has inputs `rx` (packets for the container) and `sync`, and
//! output `tx`. A vif is probed after `rx` delivery, and before `get_data`
//! on the first poll or when `sync` is true.

use std::collections::HashMap;
use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::time::Duration;

use gridloop_core::kernel::{FrameDecoder, MsgKind, Request, WireMessage};
use gridloop_core::packet::{decode_packets_b64, encode_packets_b64, FrameBuffer, Packet};
use log::{debug, info, warn};
use serde_json::{json, Map, Value};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpStream, UdpSocket};
use tokio::time::{timeout_at, Instant};

use crate::vif::MAX_DATAGRAM;

pub const MODEL: &str = "vif";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    PerContainer,
    Mux,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "per-container" => Ok(Mode::PerContainer),
            "mux" => Ok(Mode::Mux),
            other => Err(format!("unknown mode {other:?}, expected per-container or mux")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VifSimConfig {
    pub kernel: SocketAddr,
    pub listen: SocketAddr,
    pub mode: Mode,
    /// How long a vif may take to answer a barrier probe.
    pub barrier_timeout: Duration,
    /// How long `setup_done` waits for every container to announce itself.
    pub announce_timeout: Duration,
}

impl VifSimConfig {
    pub fn new(kernel: SocketAddr, listen: SocketAddr, mode: Mode) -> Self {
        VifSimConfig {
            kernel,
            listen,
            mode,
            barrier_timeout: Duration::from_secs(5),
            announce_timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, Error)]
pub enum VifSimError {
    #[error("cannot reach kernel at {0}: {1}")]
    Connect(SocketAddr, io::Error),
    #[error("kernel connection: {0}")]
    Kernel(String),
    #[error("datagram socket: {0}")]
    Socket(io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VifSimStats {
    pub hellos: u64,
    pub chunks: u64,
    pub packets_up: u64,
    pub packets_down: u64,
    pub unknown_dropped: u64,
    pub undeliverable: u64,
    pub desyncs: u64,
}

struct Container {
    eid: String,
    declared: Option<SocketAddr>,
    addr: Option<SocketAddr>,
    frames: FrameBuffer,
    ready: Vec<Packet>,
    acked: bool,
    /// Probe before the next `get_data`: set on the first poll and
    /// whenever the `sync` input says the app may have sent something.
    sync: bool,
}

struct VifSim {
    mode: Mode,
    listen: UdpSocket,
    barrier: UdpSocket,
    containers: Vec<Container>,
    by_addr: HashMap<SocketAddr, usize>,
    stats: VifSimStats,
    barrier_timeout: Duration,
    announce_timeout: Duration,
    buf: Vec<u8>,
}

fn err(msg: impl Into<String>) -> String {
    msg.into()
}

impl VifSim {
    fn on_datagram(&mut self, src: SocketAddr, data: &[u8]) {
        let idx = match self.by_addr.get(&src) {
            Some(&i) => i,
            None => match self.learn(src) {
                Some(i) => i,
                None => {
                    self.stats.unknown_dropped += 1;
                    debug!("dropping {} bytes from unannounced {src}", data.len());
                    return;
                }
            },
        };
        let c = &mut self.containers[idx];
        if data.is_empty() {
            self.stats.hellos += 1;
            return;
        }
        self.stats.chunks += 1;
        let before = c.frames.desyncs();
        let packets = c.frames.feed(data);
        self.stats.desyncs += c.frames.desyncs() - before;
        self.stats.packets_up += packets.len() as u64;
        c.ready.extend(packets);
    }

    /// A hello or a data chunk from a new address announces a container.
    fn learn(&mut self, src: SocketAddr) -> Option<usize> {
        let idx = match self.mode {
            Mode::PerContainer => self.containers.iter().position(|c| c.addr.is_none()),
            Mode::Mux => self.containers.iter().position(|c| c.addr.is_none() && c.declared == Some(src)),
        }?;
        info!("container {} announced from {src}", self.containers[idx].eid);
        self.containers[idx].addr = Some(src);
        self.by_addr.insert(src, idx);
        Some(idx)
    }

    fn drain_listen(&mut self) -> io::Result<()> {
        loop {
            let mut buf = std::mem::take(&mut self.buf);
            let r = self.listen.try_recv_from(&mut buf);
            let res = match r {
                Ok((n, src)) => {
                    self.on_datagram(src, &buf[..n]);
                    Ok(true)
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => Ok(false),
                // A refused send from an earlier datagram surfaces here.
                Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => Ok(true),
                Err(e) => Err(e),
            };
            self.buf = buf;
            if !res? {
                return Ok(());
            }
        }
    }

    /// Probe the announced vifs in `which` and wait for all answers.
    /// Datagrams that arrive meanwhile are processed; afterwards the listen
    /// socket is drained so nothing the vifs forwarded is left over.
    async fn barrier(&mut self, which: &[bool]) -> Result<(), String> {
        let mut waiting = 0;
        for (c, &probe) in self.containers.iter_mut().zip(which) {
            c.acked = true;
            if let (Some(addr), true) = (c.addr, probe) {
                self.barrier.send_to(&[], addr).await.map_err(|e| err(format!("probe to {}: {e}", c.eid)))?;
                c.acked = false;
                waiting += 1;
            }
        }
        let deadline = Instant::now() + self.barrier_timeout;
        let mut ack_buf = vec![0u8; 64];
        let mut data_buf = vec![0u8; MAX_DATAGRAM];
        while waiting > 0 {
            enum Ev {
                Ack(io::Result<(usize, SocketAddr)>),
                Data(io::Result<(usize, SocketAddr)>),
            }
            let ev = timeout_at(deadline, async {
                tokio::select! {
                    r = self.barrier.recv_from(&mut ack_buf) => Ev::Ack(r),
                    r = self.listen.recv_from(&mut data_buf) => Ev::Data(r),
                }
            })
            .await;
            match ev {
                Err(_) => {
                    let late: Vec<&str> =
                        self.containers.iter().filter(|c| !c.acked).map(|c| c.eid.as_str()).collect();
                    return Err(format!("no barrier answer from {}", late.join(", ")));
                }
                Ok(Ev::Ack(Ok((_, src)))) => {
                    if let Some(&i) = self.by_addr.get(&src) {
                        if !self.containers[i].acked {
                            self.containers[i].acked = true;
                            waiting -= 1;
                        }
                    }
                }
                Ok(Ev::Data(Ok((n, src)))) => self.on_datagram(src, &data_buf[..n]),
                Ok(Ev::Ack(Err(e))) | Ok(Ev::Data(Err(e))) => {
                    if e.kind() != io::ErrorKind::ConnectionRefused {
                        return Err(format!("datagram socket: {e}"));
                    }
                }
            }
        }
        self.drain_listen().map_err(|e| format!("datagram socket: {e}"))
    }

    async fn wait_announced(&mut self) -> Result<(), String> {
        let deadline = Instant::now() + self.announce_timeout;
        let mut data_buf = vec![0u8; MAX_DATAGRAM];
        while self.containers.iter().any(|c| c.addr.is_none()) {
            match timeout_at(deadline, self.listen.recv_from(&mut data_buf)).await {
                Ok(Ok((n, src))) => self.on_datagram(src, &data_buf[..n]),
                Ok(Err(e)) if e.kind() == io::ErrorKind::ConnectionRefused => {}
                Ok(Err(e)) => return Err(format!("datagram socket: {e}")),
                Err(_) => {
                    let silent: Vec<&str> =
                        self.containers.iter().filter(|c| c.addr.is_none()).map(|c| c.eid.as_str()).collect();
                    return Err(format!("containers never announced: {}", silent.join(", ")));
                }
            }
        }
        Ok(())
    }

    fn index_of(&self, eid: &str) -> Result<usize, String> {
        self.containers.iter().position(|c| c.eid == eid).ok_or_else(|| format!("unknown entity {eid:?}"))
    }

    fn create(&mut self, num: usize, model: &str, params: &Map<String, Value>) -> Result<Value, String> {
        if model != MODEL {
            return Err(format!("unknown model {model:?}"));
        }
        if self.mode == Mode::PerContainer && self.containers.len() + num != 1 {
            return Err("per-container mode serves exactly one entity".into());
        }
        if num != 1 && (params.contains_key("name") || params.contains_key("container")) {
            return Err("name and container apply to a single entity".into());
        }
        let declared = match params.get("container") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.parse::<SocketAddr>().map_err(|e| format!("container {s:?}: {e}"))?),
            Some(other) => return Err(format!("container must be an address string, got {other}")),
        };
        if self.mode == Mode::Mux && declared.is_none() {
            return Err("mux mode needs the container address of each entity".into());
        }
        let mut out = Vec::new();
        for _ in 0..num {
            let eid = match params.get("name").and_then(Value::as_str) {
                Some(n) => n.to_string(),
                None => format!("vif-{}", self.containers.len()),
            };
            if self.containers.iter().any(|c| c.eid == eid) {
                return Err(format!("entity {eid:?} exists"));
            }
            if declared.is_some() && self.containers.iter().any(|c| c.declared == declared) {
                return Err(format!("container address {} used twice", declared.expect("checked")));
            }
            out.push(json!({"eid": eid, "type": MODEL}));
            self.containers.push(Container {
                eid,
                declared,
                addr: None,
                frames: FrameBuffer::new(),
                ready: Vec::new(),
                acked: true,
                sync: true,
            });
        }
        Ok(Value::Array(out))
    }

    async fn step(&mut self, inputs: &Value) -> Result<Value, String> {
        let inputs = inputs.as_object().ok_or("step inputs must be an object")?;
        let mut outgoing: Vec<(usize, Vec<Packet>)> = Vec::new();
        for (eid, attrs) in inputs {
            let idx = self.index_of(eid)?;
            let attrs = attrs.as_object().ok_or("entity inputs must be an object")?;
            for (attr, sources) in attrs {
                let sources = sources.as_object().ok_or("attribute inputs must be an object")?;
                match attr.as_str() {
                    "rx" => {}
                    "sync" => {
                        if sources.values().any(|v| v.as_bool() == Some(true)) {
                            self.containers[idx].sync = true;
                        }
                        continue;
                    }
                    _ => return Err(format!("{eid} has no input {attr:?}")),
                }
                for (src, value) in sources {
                    let list = match value {
                        Value::Null => continue,
                        Value::Array(list) => list,
                        other => return Err(format!("rx from {src} must be a list, got {other}")),
                    };
                    let strings: Vec<&str> = list
                        .iter()
                        .map(|v| v.as_str().ok_or_else(|| format!("rx from {src}: non-string entry")))
                        .collect::<Result<_, _>>()?;
                    let packets = decode_packets_b64(&strings).map_err(|e| format!("rx from {src}: {e}"))?;
                    outgoing.push((idx, packets));
                }
            }
        }
        let mut delivered = vec![false; self.containers.len()];
        for (idx, packets) in outgoing {
            delivered[idx] |= !packets.is_empty();
            match self.containers[idx].addr {
                Some(addr) => {
                    for p in &packets {
                        self.listen.send_to(p.bytes(), addr).await.map_err(|e| format!("send to {addr}: {e}"))?;
                    }
                    self.stats.packets_down += packets.len() as u64;
                }
                None => self.stats.undeliverable += packets.len() as u64,
            }
        }
        // Only vifs that were handed packets need to confirm delivery.
        if delivered.contains(&true) {
            self.barrier(&delivered).await?;
        }
        Ok(Value::Null)
    }

    async fn get_data(&mut self, request: &Value) -> Result<Value, String> {
        let request = request.as_object().ok_or("get_data request must be an object")?;
        let which: Vec<bool> = self.containers.iter_mut().map(|c| std::mem::take(&mut c.sync)).collect();
        if which.contains(&true) {
            self.barrier(&which).await?;
        } else {
            self.drain_listen().map_err(|e| format!("datagram socket: {e}"))?;
        }
        let mut out = Map::new();
        for (eid, attrs) in request {
            let idx = self.index_of(eid)?;
            let attrs = attrs.as_array().ok_or("requested attributes must be a list")?;
            let mut entry = Map::new();
            for a in attrs {
                match a.as_str() {
                    Some("tx") => {
                        let packets = std::mem::take(&mut self.containers[idx].ready);
                        entry.insert("tx".into(), json!(encode_packets_b64(&packets)));
                    }
                    _ => return Err(format!("{eid} has no output {a}")),
                }
            }
            out.insert(eid.clone(), Value::Object(entry));
        }
        // Entities nobody asked about still get a fresh start next step.
        for c in &mut self.containers {
            if !request.contains_key(&c.eid) {
                c.ready.clear();
            }
        }
        Ok(Value::Object(out))
    }

    async fn handle(&mut self, req: &Request) -> Result<Value, String> {
        let arg = |i: usize| req.args.get(i).cloned().unwrap_or(Value::Null);
        match req.method.as_str() {
            "init" => Ok(json!({
                "models": {
                    MODEL: {"public": true, "params": ["name", "container"], "inputs": ["rx", "sync"], "outputs": ["tx"]}
                }
            })),
            "create" => {
                let num = arg(0).as_u64().ok_or("create needs a count")? as usize;
                let model = arg(1);
                self.create(num, model.as_str().ok_or("create needs a model name")?, &req.kwargs)
            }
            "setup_done" => self.wait_announced().await.map(|_| Value::Null),
            "step" => self.step(&arg(1)).await,
            "get_data" => self.get_data(&arg(0)).await,
            "stop" => Ok(json!(self.stats_json())),
            other => Err(format!("unknown method {other:?}")),
        }
    }

    fn stats_json(&self) -> Value {
        let s = &self.stats;
        json!({
            "hellos": s.hellos, "chunks": s.chunks, "packets_up": s.packets_up,
            "packets_down": s.packets_down, "unknown_dropped": s.unknown_dropped,
            "undeliverable": s.undeliverable, "desyncs": s.desyncs,
        })
    }
}

/// Connect to the kernel and serve it until `stop` or until `shutdown`
/// resolves.
pub async fn run_vifsim(config: VifSimConfig, shutdown: impl Future<Output = ()>) -> Result<VifSimStats, VifSimError> {
    let listen = UdpSocket::bind(config.listen).await.map_err(VifSimError::Socket)?;
    let barrier_bind = SocketAddr::new(listen.local_addr().map_err(VifSimError::Socket)?.ip(), 0);
    let barrier = UdpSocket::bind(barrier_bind).await.map_err(VifSimError::Socket)?;
    let stream = TcpStream::connect(config.kernel).await.map_err(|e| VifSimError::Connect(config.kernel, e))?;
    stream.set_nodelay(true).map_err(|e| VifSimError::Kernel(e.to_string()))?;
    let (mut rd, mut wr) = stream.into_split();

    let mut sim = VifSim {
        mode: config.mode,
        listen,
        barrier,
        containers: Vec::new(),
        by_addr: HashMap::new(),
        stats: VifSimStats::default(),
        barrier_timeout: config.barrier_timeout,
        announce_timeout: config.announce_timeout,
        buf: vec![0u8; MAX_DATAGRAM],
    };
    let mut decoder = FrameDecoder::new();
    let mut tcp_buf = vec![0u8; 64 * 1024];
    let mut data_buf = vec![0u8; MAX_DATAGRAM];
    tokio::pin!(shutdown);
    loop {
        while let Some(msg) = decoder.next_message().map_err(|e| VifSimError::Kernel(e.to_string()))? {
            if msg.kind != MsgKind::Request {
                return Err(VifSimError::Kernel("kernel sent a reply, expected requests only".into()));
            }
            let reply = match msg.as_request() {
                Ok(req) => match sim.handle(&req).await {
                    Ok(v) => {
                        let stop = req.method == "stop";
                        let frame = WireMessage::success(msg.id, v).encode();
                        let frame = frame.map_err(|e| VifSimError::Kernel(e.to_string()))?;
                        wr.write_all(&frame).await.map_err(|e| VifSimError::Kernel(e.to_string()))?;
                        if stop {
                            info!("stopped by kernel: {:?}", sim.stats);
                            return Ok(sim.stats);
                        }
                        continue;
                    }
                    Err(e) => {
                        warn!("{} failed: {e}", req.method);
                        WireMessage::error(msg.id, e)
                    }
                },
                Err(e) => WireMessage::error(msg.id, e.to_string()),
            };
            let frame = reply.encode().map_err(|e| VifSimError::Kernel(e.to_string()))?;
            wr.write_all(&frame).await.map_err(|e| VifSimError::Kernel(e.to_string()))?;
        }
        enum Ev {
            Kernel(io::Result<usize>),
            Data(io::Result<(usize, SocketAddr)>),
            Quit,
        }
        let ev = tokio::select! {
            r = rd.read(&mut tcp_buf) => Ev::Kernel(r),
            r = sim.listen.recv_from(&mut data_buf) => Ev::Data(r),
            _ = &mut shutdown => Ev::Quit,
        };
        match ev {
            Ev::Kernel(Ok(0)) => return Err(VifSimError::Kernel("kernel closed the connection".into())),
            Ev::Kernel(Ok(n)) => decoder.feed(&tcp_buf[..n]),
            Ev::Kernel(Err(e)) => return Err(VifSimError::Kernel(e.to_string())),
            Ev::Data(Ok((n, src))) => sim.on_datagram(src, &data_buf[..n]),
            Ev::Data(Err(e)) if e.kind() == io::ErrorKind::ConnectionRefused => {}
            Ev::Data(Err(e)) => return Err(VifSimError::Socket(e)),
            Ev::Quit => return Ok(sim.stats),
        }
    }
}
