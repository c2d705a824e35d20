//! Where the application's packets come from: a kernel tun device, or a
//! plain UDP socket pair standing in for it in tests.

use std::ffi::CString;
use std::io;
use std::net::{IpAddr, SocketAddr};
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::process::Command;

use tokio::io::unix::AsyncFd;
use tokio::io::Interest;
use tokio::net::UdpSocket;

const TUNSETIFF: libc::c_ulong = 0x4004_54ca;
const IFF_TUN: libc::c_short = 0x0001;
const IFF_NO_PI: libc::c_short = 0x1000;

#[repr(C)]
struct IfReq {
    name: [libc::c_char; libc::IFNAMSIZ],
    flags: libc::c_short,
    _pad: [u8; 22],
}

pub struct TunDevice {
    fd: AsyncFd<OwnedFd>,
    name: String,
}

impl TunDevice {
    /// Open `/dev/net/tun` and attach to (or create) interface `name`.
    /// Needs CAP_NET_ADMIN.
    pub fn open(name: &str) -> io::Result<TunDevice> {
        if name.is_empty() || name.len() >= libc::IFNAMSIZ {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("bad interface name {name:?}")));
        }
        let path = CString::new("/dev/net/tun").expect("no interior nul");
        // SAFETY: plain open(2) on a constant path.
        let raw = unsafe { libc::open(path.as_ptr(), libc::O_RDWR | libc::O_NONBLOCK | libc::O_CLOEXEC) };
        if raw < 0 {
            return Err(io::Error::last_os_error());
        }
        // SAFETY: raw is a fresh descriptor we own.
        let fd = unsafe { OwnedFd::from_raw_fd(raw) };
        let mut req = IfReq { name: [0; libc::IFNAMSIZ], flags: IFF_TUN | IFF_NO_PI, _pad: [0; 22] };
        for (dst, src) in req.name.iter_mut().zip(name.bytes()) {
            *dst = src as libc::c_char;
        }
        // SAFETY: req is a correctly sized ifreq for TUNSETIFF.
        if unsafe { libc::ioctl(fd.as_raw_fd(), TUNSETIFF as _, &mut req) } < 0 {
            return Err(io::Error::last_os_error());
        }
        // SAFETY: the descriptor is owned by the AsyncFd and closed only when
        // it is dropped.
        let fd = unsafe { AsyncFd::register(fd) }.map_err(io::Error::from)?;
        Ok(TunDevice { fd, name: name.to_string() })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn read_raw(fd: &OwnedFd, buf: &mut [u8]) -> io::Result<usize> {
        // SAFETY: buf is valid for buf.len() bytes.
        let n = unsafe { libc::read(fd.as_raw_fd(), buf.as_mut_ptr().cast(), buf.len()) };
        if n < 0 {
            Err(io::Error::last_os_error())
        } else {
            Ok(n as usize)
        }
    }

    fn write_raw(fd: &OwnedFd, buf: &[u8]) -> io::Result<usize> {
        // SAFETY: buf is valid for buf.len() bytes.
        let n = unsafe { libc::write(fd.as_raw_fd(), buf.as_ptr().cast(), buf.len()) };
        if n < 0 {
            Err(io::Error::last_os_error())
        } else {
            Ok(n as usize)
        }
    }
}

/// Bring `dev` up with `addr`, send everything through it, and keep the
/// route to `exclude` (the vif-sim) on whatever interface it used before.
pub fn configure_routes(dev: &str, addr: &str, exclude: IpAddr) -> io::Result<()> {
    let via = Command::new("ip").args(["route", "get", &exclude.to_string()]).output()?;
    let text = String::from_utf8_lossy(&via.stdout);
    let words: Vec<&str> = text.split_whitespace().collect();
    let after = |key: &str| words.iter().position(|w| *w == key).and_then(|i| words.get(i + 1)).copied();
    let mut host_route = vec!["route".to_string(), "replace".into(), format!("{exclude}")];
    if let Some(gw) = after("via") {
        host_route.extend(["via".into(), gw.to_string()]);
    }
    if let Some(d) = after("dev") {
        host_route.extend(["dev".into(), d.to_string()]);
    }
    let steps: Vec<Vec<String>> = vec![
        vec!["addr".into(), "add".into(), addr.into(), "dev".into(), dev.into()],
        vec!["link".into(), "set".into(), "dev".into(), dev.into(), "up".into()],
        host_route,
        vec!["route".into(), "replace".into(), "default".into(), "dev".into(), dev.into()],
    ];
    for args in steps {
        let status = Command::new("ip").args(&args).status()?;
        if !status.success() {
            return Err(io::Error::other(format!("ip {} failed: {status}", args.join(" "))));
        }
    }
    Ok(())
}

pub enum Device {
    /// Raw IP packets exchanged as UDP datagrams with the app at `app`.
    Loopback { sock: UdpSocket, app: SocketAddr },
    Tun(TunDevice),
}

impl Device {
    pub async fn loopback(bind: SocketAddr, app: SocketAddr) -> io::Result<Device> {
        Ok(Device::Loopback { sock: UdpSocket::bind(bind).await?, app })
    }

    pub async fn recv(&self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Device::Loopback { sock, .. } => sock.recv(buf).await,
            Device::Tun(t) => t.fd.async_io(Interest::READABLE, |fd| TunDevice::read_raw(fd, buf)).await,
        }
    }

    /// Non-blocking read; `WouldBlock` once nothing is queued.
    pub fn try_recv(&self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Device::Loopback { sock, .. } => sock.try_recv(buf),
            Device::Tun(t) => t.fd.try_io(Interest::READABLE, |fd| TunDevice::read_raw(fd, buf)),
        }
    }

    pub async fn send(&self, packet: &[u8]) -> io::Result<()> {
        match self {
            Device::Loopback { sock, app } => sock.send_to(packet, app).await.map(drop),
            Device::Tun(t) => t.fd.async_io(Interest::WRITABLE, |fd| TunDevice::write_raw(fd, packet)).await.map(drop),
        }
    }
}
