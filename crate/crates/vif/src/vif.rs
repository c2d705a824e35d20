//! The bridge that runs beside the application.
//!
//! Everything the app sends is forwarded to the vif-sim as soon as it is
//! read, one tunnel datagram per device read. Until the first datagram
//! arrives from the vif-sim the data is held in a bounded buffer instead,
//! and the container is announced with bursts of zero-length hellos.
//!
//! A zero-length datagram arriving on the tunnel socket is a probe: the vif
//! drains the device, forwards what it found, and answers with a
//! zero-length datagram to the probe's sender. The vif-sim uses this as a
//! step barrier.

use std::collections::VecDeque;
use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::time::Duration;

use log::{debug, info, warn};
use thiserror::Error;
use tokio::net::UdpSocket;
use tokio::time::{sleep_until, Instant};

use crate::device::{Device, TunDevice};

/// Largest payload a single UDP datagram can carry.
pub const MAX_DATAGRAM: usize = 65_507;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HelloBurst {
    pub count: u32,
    pub interval: Duration,
    /// Pause after a burst before the next one.
    pub retry: Duration,
}

impl Default for HelloBurst {
    fn default() -> Self {
        HelloBurst { count: 5, interval: Duration::from_millis(100), retry: Duration::from_secs(1) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportConfig {
    Loopback { device: SocketAddr, app: SocketAddr },
    Tun { name: String, addr: Option<String> },
}

#[derive(Debug, Clone)]
pub struct VifConfig {
    pub transport: TransportConfig,
    pub peer: SocketAddr,
    pub bind: SocketAddr,
    pub buffer_limit: usize,
    pub hello: HelloBurst,
}

#[derive(Debug, Error)]
pub enum VifError {
    #[error("cannot create device: {0}")]
    Device(io::Error),
    #[error("tunnel socket: {0}")]
    Tunnel(io::Error),
    #[error("hello burst needs at least one datagram")]
    EmptyHello,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VifStats {
    pub hellos: u64,
    pub forwarded: u64,
    pub forwarded_bytes: u64,
    pub delivered: u64,
    pub buffered: u64,
    pub buffer_dropped: u64,
    pub probes: u64,
}

/// Holds app data while no vif-sim is listening; drops the oldest entries
/// once `limit` bytes would be exceeded.
#[derive(Debug)]
pub struct PreStartBuffer {
    queue: VecDeque<Vec<u8>>,
    bytes: usize,
    limit: usize,
    dropped: u64,
}

impl PreStartBuffer {
    pub fn new(limit: usize) -> Self {
        PreStartBuffer { queue: VecDeque::new(), bytes: 0, limit, dropped: 0 }
    }

    pub fn push(&mut self, data: Vec<u8>) {
        if data.len() > self.limit {
            self.dropped += 1;
            return;
        }
        while self.bytes + data.len() > self.limit {
            let old = self.queue.pop_front().expect("bytes > 0 implies an entry");
            self.bytes -= old.len();
            self.dropped += 1;
        }
        self.bytes += data.len();
        self.queue.push_back(data);
    }

    pub fn drain(&mut self) -> impl Iterator<Item = Vec<u8>> + '_ {
        self.bytes = 0;
        self.queue.drain(..)
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

struct Vif {
    device: Device,
    tunnel: UdpSocket,
    peer: SocketAddr,
    live: bool,
    pending: PreStartBuffer,
    stats: VifStats,
}

impl Vif {
    async fn go_live(&mut self) -> io::Result<()> {
        if self.live {
            return Ok(());
        }
        self.live = true;
        info!("vif-sim at {} is live, flushing {} buffered chunks", self.peer, self.pending.len());
        let held: Vec<Vec<u8>> = self.pending.drain().collect();
        for data in held {
            self.forward(&data).await?;
        }
        Ok(())
    }

    async fn forward(&mut self, data: &[u8]) -> io::Result<()> {
        self.tunnel.send_to(data, self.peer).await?;
        self.stats.forwarded += 1;
        self.stats.forwarded_bytes += data.len() as u64;
        Ok(())
    }

    async fn from_app(&mut self, data: &[u8]) -> io::Result<()> {
        if data.is_empty() {
            return Ok(());
        }
        if self.live {
            self.forward(data).await
        } else {
            self.stats.buffered += 1;
            self.pending.push(data.to_vec());
            Ok(())
        }
    }

    async fn from_tunnel(&mut self, data: &[u8], src: SocketAddr) -> io::Result<()> {
        self.go_live().await?;
        if data.is_empty() {
            self.stats.probes += 1;
            let mut buf = vec![0u8; MAX_DATAGRAM];
            loop {
                match self.device.try_recv(&mut buf) {
                    Ok(n) => self.from_app(&buf[..n].to_vec()).await?,
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                    Err(e) => return Err(e),
                }
            }
            self.tunnel.send_to(&[], src).await?;
        } else if src == self.peer {
            self.device.send(data).await?;
            self.stats.delivered += 1;
        } else {
            debug!("ignoring {} bytes from stranger {src}", data.len());
        }
        Ok(())
    }
}

/// Run until `shutdown` resolves. The returned counters are also logged.
pub async fn run_vif(config: VifConfig, shutdown: impl Future<Output = ()>) -> Result<VifStats, VifError> {
    if config.hello.count == 0 {
        return Err(VifError::EmptyHello);
    }
    let device = match &config.transport {
        TransportConfig::Loopback { device, app } => Device::loopback(*device, *app).await.map_err(VifError::Device)?,
        TransportConfig::Tun { name, addr } => {
            let tun = TunDevice::open(name).map_err(VifError::Device)?;
            if let Some(addr) = addr {
                crate::device::configure_routes(tun.name(), addr, config.peer.ip()).map_err(VifError::Device)?;
            }
            Device::Tun(tun)
        }
    };
    let tunnel = UdpSocket::bind(config.bind).await.map_err(VifError::Tunnel)?;
    let mut vif = Vif {
        device,
        tunnel,
        peer: config.peer,
        live: false,
        pending: PreStartBuffer::new(config.buffer_limit),
        stats: VifStats::default(),
    };

    let mut app_buf = vec![0u8; MAX_DATAGRAM];
    let mut tun_buf = vec![0u8; MAX_DATAGRAM];
    let mut next_hello = Instant::now();
    let mut in_burst = 0u32;
    tokio::pin!(shutdown);
    loop {
        enum Ev {
            App(io::Result<usize>),
            Tunnel(io::Result<(usize, SocketAddr)>),
            Hello,
            Quit,
        }
        let ev = tokio::select! {
            r = vif.device.recv(&mut app_buf) => Ev::App(r),
            r = vif.tunnel.recv_from(&mut tun_buf) => Ev::Tunnel(r),
            _ = sleep_until(next_hello), if !vif.live => Ev::Hello,
            _ = &mut shutdown => Ev::Quit,
        };
        let res = match ev {
            Ev::App(Ok(n)) => {
                let data = app_buf[..n].to_vec();
                vif.from_app(&data).await
            }
            Ev::Tunnel(Ok((n, src))) => {
                let data = tun_buf[..n].to_vec();
                vif.from_tunnel(&data, src).await
            }
            Ev::App(Err(e)) | Ev::Tunnel(Err(e)) => Err(e),
            Ev::Hello => {
                vif.stats.hellos += 1;
                in_burst += 1;
                if in_burst >= config.hello.count {
                    in_burst = 0;
                    next_hello += config.hello.retry;
                } else {
                    next_hello += config.hello.interval;
                }
                vif.tunnel.send_to(&[], vif.peer).await.map(drop)
            }
            Ev::Quit => break,
        };
        if let Err(e) = res {
            // Refused sends and similar are transient on an unconnected
            // datagram socket; keep going.
            warn!("vif i/o error: {e}");
        }
    }
    vif.stats.buffer_dropped = vif.pending.dropped();
    info!("vif stopping: {:?}", vif.stats);
    Ok(vif.stats)
}
