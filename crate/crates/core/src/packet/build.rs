//! Minimal packet construction and inspection for the protocols the bundled
//! test applications speak (ICMP echo and UDP).

use std::net::{Ipv4Addr, Ipv6Addr};

use super::Packet;

const PROTO_ICMP: u8 = 1;
const PROTO_UDP: u8 = 17;
const DEFAULT_TTL: u8 = 64;

/// RFC 1071 ones-complement checksum.
pub fn internet_checksum(data: &[u8]) -> u16 {
    let mut sum: u32 = 0;
    let mut chunks = data.chunks_exact(2);
    for c in &mut chunks {
        sum += u16::from_be_bytes([c[0], c[1]]) as u32;
    }
    if let [last] = chunks.remainder() {
        sum += (*last as u32) << 8;
    }
    while sum >> 16 != 0 {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

fn ipv4_packet(src: Ipv4Addr, dst: Ipv4Addr, proto: u8, ident: u16, payload: &[u8]) -> Packet {
    let total = 20 + payload.len();
    assert!(total <= super::MAX_PACKET_LEN, "payload too large for IPv4");
    let mut b = Vec::with_capacity(total);
    b.extend_from_slice(&[0x45, 0]);
    b.extend_from_slice(&(total as u16).to_be_bytes());
    b.extend_from_slice(&ident.to_be_bytes());
    b.extend_from_slice(&[0x40, 0x00, DEFAULT_TTL, proto, 0, 0]);
    b.extend_from_slice(&src.octets());
    b.extend_from_slice(&dst.octets());
    let csum = internet_checksum(&b[..20]);
    b[10..12].copy_from_slice(&csum.to_be_bytes());
    b.extend_from_slice(payload);
    Packet::parse(b).expect("constructed packet is well formed")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IcmpKind {
    EchoRequest,
    EchoReply,
}

/// Build an IPv4 ICMP echo request or reply.
pub fn icmp_echo(src: Ipv4Addr, dst: Ipv4Addr, kind: IcmpKind, ident: u16, seq: u16, data: &[u8]) -> Packet {
    let ty = match kind {
        IcmpKind::EchoRequest => 8,
        IcmpKind::EchoReply => 0,
    };
    let mut icmp = Vec::with_capacity(8 + data.len());
    icmp.extend_from_slice(&[ty, 0, 0, 0]);
    icmp.extend_from_slice(&ident.to_be_bytes());
    icmp.extend_from_slice(&seq.to_be_bytes());
    icmp.extend_from_slice(data);
    let csum = internet_checksum(&icmp);
    icmp[2..4].copy_from_slice(&csum.to_be_bytes());
    ipv4_packet(src, dst, PROTO_ICMP, seq, &icmp)
}

/// Build an IPv4 UDP datagram. The UDP checksum is left at zero (optional in IPv4).
pub fn ipv4_udp(src: Ipv4Addr, dst: Ipv4Addr, src_port: u16, dst_port: u16, data: &[u8]) -> Packet {
    let mut udp = Vec::with_capacity(8 + data.len());
    udp.extend_from_slice(&src_port.to_be_bytes());
    udp.extend_from_slice(&dst_port.to_be_bytes());
    udp.extend_from_slice(&((8 + data.len()) as u16).to_be_bytes());
    udp.extend_from_slice(&[0, 0]);
    udp.extend_from_slice(data);
    ipv4_packet(src, dst, PROTO_UDP, 0, &udp)
}

/// Build an IPv6 UDP datagram with a correct pseudo-header checksum.
pub fn ipv6_udp(src: Ipv6Addr, dst: Ipv6Addr, src_port: u16, dst_port: u16, data: &[u8]) -> Packet {
    let udp_len = 8 + data.len();
    let mut udp = Vec::with_capacity(udp_len);
    udp.extend_from_slice(&src_port.to_be_bytes());
    udp.extend_from_slice(&dst_port.to_be_bytes());
    udp.extend_from_slice(&(udp_len as u16).to_be_bytes());
    udp.extend_from_slice(&[0, 0]);
    udp.extend_from_slice(data);

    let mut pseudo = Vec::with_capacity(40 + udp_len);
    pseudo.extend_from_slice(&src.octets());
    pseudo.extend_from_slice(&dst.octets());
    pseudo.extend_from_slice(&(udp_len as u32).to_be_bytes());
    pseudo.extend_from_slice(&[0, 0, 0, PROTO_UDP]);
    pseudo.extend_from_slice(&udp);
    let csum = match internet_checksum(&pseudo) {
        0 => 0xffff,
        c => c,
    };
    udp[6..8].copy_from_slice(&csum.to_be_bytes());

    let mut b = Vec::with_capacity(40 + udp_len);
    b.extend_from_slice(&[0x60, 0, 0, 0]);
    b.extend_from_slice(&(udp_len as u16).to_be_bytes());
    b.extend_from_slice(&[PROTO_UDP, DEFAULT_TTL]);
    b.extend_from_slice(&src.octets());
    b.extend_from_slice(&dst.octets());
    b.extend_from_slice(&udp);
    Packet::parse(b).expect("constructed packet is well formed")
}

/// Parsed ICMP echo header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IcmpEcho<'a> {
    pub kind: IcmpKind,
    pub ident: u16,
    pub seq: u16,
    pub data: &'a [u8],
}

/// Parsed UDP header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UdpDatagram<'a> {
    pub src_port: u16,
    pub dst_port: u16,
    pub data: &'a [u8],
}

impl Packet {
    /// The ICMP echo message carried by an IPv4 packet, if any.
    pub fn icmp_echo(&self) -> Option<IcmpEcho<'_>> {
        if self.version() != 4 || self.protocol() != PROTO_ICMP {
            return None;
        }
        let p = self.ip_payload();
        if p.len() < 8 || p[1] != 0 {
            return None;
        }
        let kind = match p[0] {
            8 => IcmpKind::EchoRequest,
            0 => IcmpKind::EchoReply,
            _ => return None,
        };
        Some(IcmpEcho {
            kind,
            ident: u16::from_be_bytes([p[4], p[5]]),
            seq: u16::from_be_bytes([p[6], p[7]]),
            data: &p[8..],
        })
    }

    /// The UDP datagram carried by this packet, if any.
    pub fn udp(&self) -> Option<UdpDatagram<'_>> {
        if self.protocol() != PROTO_UDP {
            return None;
        }
        let p = self.ip_payload();
        if p.len() < 8 {
            return None;
        }
        let len = u16::from_be_bytes([p[4], p[5]]) as usize;
        if len < 8 || len > p.len() {
            return None;
        }
        Some(UdpDatagram {
            src_port: u16::from_be_bytes([p[0], p[1]]),
            dst_port: u16::from_be_bytes([p[2], p[3]]),
            data: &p[8..len],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_rfc1071_example() {
        // Worked example from RFC 1071 section 3: sum is 0xddf2.
        let data = [0x00, 0x01, 0xf2, 0x03, 0xf4, 0xf5, 0xf6, 0xf7];
        assert_eq!(internet_checksum(&data), !0xddf2);
    }

    #[test]
    fn echo_round_trip() {
        let a: Ipv4Addr = "10.64.0.2".parse().unwrap();
        let b: Ipv4Addr = "10.64.1.2".parse().unwrap();
        let p = icmp_echo(a, b, IcmpKind::EchoRequest, 7, 3, b"hello");
        assert_eq!(p.len(), 20 + 8 + 5);
        assert_eq!(internet_checksum(&p.bytes()[..20]), 0);
        assert_eq!(internet_checksum(p.ip_payload()), 0);
        let e = p.icmp_echo().unwrap();
        assert_eq!((e.kind, e.ident, e.seq, e.data), (IcmpKind::EchoRequest, 7, 3, &b"hello"[..]));
    }

    #[test]
    fn udp_round_trip() {
        let p = ipv4_udp("10.64.0.2".parse().unwrap(), "10.64.1.2".parse().unwrap(), 4000, 5201, &[9; 100]);
        let u = p.udp().unwrap();
        assert_eq!((u.src_port, u.dst_port, u.data.len()), (4000, 5201, 100));

        let p6 = ipv6_udp("fd00::1".parse().unwrap(), "fd00::2".parse().unwrap(), 1, 2, &[1, 2, 3]);
        assert_eq!(p6.len(), 40 + 8 + 3);
        assert_eq!(p6.udp().unwrap().data, &[1, 2, 3]);
    }
}
