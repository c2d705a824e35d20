//! Socket inspection through `/proc`: which TCP connections and UDP
//! sockets a process holds.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Proto {
    Tcp,
    Udp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SocketEntry {
    pub proto: Proto,
    pub local: SocketAddr,
    pub remote: SocketAddr,
}

/// Parse `0100007F:1F90` (IPv4) or the 32-digit IPv6 form.
pub fn parse_proc_addr(s: &str) -> Option<SocketAddr> {
    let (ip, port) = s.split_once(':')?;
    let port = u16::from_str_radix(port, 16).ok()?;
    let ip = match ip.len() {
        8 => IpAddr::V4(Ipv4Addr::from(u32::from_str_radix(ip, 16).ok()?.to_le_bytes())),
        32 => {
            let mut b = [0u8; 16];
            for w in 0..4 {
                let word = u32::from_str_radix(&ip[w * 8..w * 8 + 8], 16).ok()?;
                b[w * 4..w * 4 + 4].copy_from_slice(&word.to_le_bytes());
            }
            IpAddr::V6(Ipv6Addr::from(b))
        }
        _ => return None,
    };
    Some(SocketAddr::new(ip, port))
}

/// `inode -> entry` for one `/proc/<pid>/net/{tcp,udp}{,6}` table.
pub fn parse_table(text: &str, proto: Proto) -> HashMap<u64, SocketEntry> {
    let mut out = HashMap::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 10 {
            continue;
        }
        let (Some(local), Some(remote), Ok(inode)) = (parse_proc_addr(cols[1]), parse_proc_addr(cols[2]), cols[9].parse()) else {
            continue;
        };
        out.insert(inode, SocketEntry { proto, local, remote });
    }
    out
}

fn socket_inodes(pid: u32) -> io::Result<Vec<u64>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(format!("/proc/{pid}/fd"))? {
        let Ok(target) = fs::read_link(entry?.path()) else { continue };
        let t = target.to_string_lossy();
        if let Some(n) = t.strip_prefix("socket:[").and_then(|r| r.strip_suffix(']')) {
            if let Ok(n) = n.parse() {
                out.push(n);
            }
        }
    }
    Ok(out)
}

/// Internet sockets held by `pid`.
pub fn sockets_of(pid: u32) -> io::Result<Vec<SocketEntry>> {
    let mut table = HashMap::new();
    for (file, proto) in [("tcp", Proto::Tcp), ("tcp6", Proto::Tcp), ("udp", Proto::Udp), ("udp6", Proto::Udp)] {
        if let Ok(text) = fs::read_to_string(format!("/proc/{pid}/net/{file}")) {
            table.extend(parse_table(&text, proto));
        }
    }
    let mut out: Vec<SocketEntry> = socket_inodes(pid)?.into_iter().filter_map(|i| table.get(&i).cloned()).collect();
    out.sort_by_key(|e| (e.proto as u8, e.local, e.remote));
    Ok(out)
}

/// Result of checking that the vif tunnel never uses a stream transport.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DatagramCheck {
    pub vifs_checked: usize,
    pub vifsims_checked: usize,
    pub udp_sockets: usize,
    pub violations: Vec<String>,
}

impl DatagramCheck {
    pub fn ok(&self) -> bool {
        self.violations.is_empty() && self.vifs_checked > 0 && self.udp_sockets > 0
    }

    /// A vif may hold no TCP socket at all.
    pub fn vif(&mut self, name: &str, pid: u32) {
        match sockets_of(pid) {
            Ok(socks) => {
                self.vifs_checked += 1;
                for s in socks {
                    match s.proto {
                        Proto::Udp => self.udp_sockets += 1,
                        Proto::Tcp => self.violations.push(format!("vif {name} holds TCP {} -> {}", s.local, s.remote)),
                    }
                }
            }
            Err(e) => self.violations.push(format!("cannot inspect vif {name}: {e}")),
        }
    }

    /// A vif-sim may only hold its TCP connection to the kernel.
    pub fn vifsim(&mut self, name: &str, pid: u32, kernel: SocketAddr) {
        match sockets_of(pid) {
            Ok(socks) => {
                self.vifsims_checked += 1;
                for s in socks.iter().filter(|s| s.proto == Proto::Tcp) {
                    if s.remote != kernel {
                        self.violations.push(format!("vif-sim {name} holds TCP {} -> {}", s.local, s.remote));
                    }
                }
            }
            Err(e) => self.violations.push(format!("cannot inspect vif-sim {name}: {e}")),
        }
    }
}
