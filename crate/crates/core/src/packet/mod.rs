//! Raw IP packets as they travel between applications and the simulator.

mod build;
mod codec;
mod reassembly;

use std::fmt;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::sync::Arc;

use thiserror::Error;

use crate::time::SimTime;

pub use build::{icmp_echo, internet_checksum, ipv4_udp, ipv6_udp, IcmpEcho, IcmpKind, UdpDatagram};
pub use codec::{decode_packets_b64, encode_packet_b64, encode_packets_b64, CodecError};
pub use reassembly::{FrameBuffer, FRAME_BUFFER_LIMIT};

/// Largest packet the simulator carries.
pub const MAX_PACKET_LEN: usize = 65_535;
pub const IPV4_MIN_HEADER: usize = 20;
pub const IPV6_HEADER: usize = 40;

/// Result of inspecting the first bytes of a would-be IP packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeaderLength {
    /// At least this many bytes are needed before the length is known.
    NeedMore(usize),
    /// Total packet length as declared by the header.
    Length(usize),
    /// The version nibble is neither 4 nor 6.
    BadVersion,
}

/// Read the total packet length from an IPv4 or IPv6 header prefix.
///
/// IPv4 declares its total length in bytes 2..4. IPv6 declares only the
/// payload length (bytes 4..6), to which the fixed 40-byte header is added.
pub fn packet_len_from_header(bytes: &[u8]) -> HeaderLength {
    let Some(&first) = bytes.first() else {
        return HeaderLength::NeedMore(1);
    };
    match first >> 4 {
        4 => {
            if bytes.len() < 4 {
                HeaderLength::NeedMore(4)
            } else {
                HeaderLength::Length(u16::from_be_bytes([bytes[2], bytes[3]]) as usize)
            }
        }
        6 => {
            if bytes.len() < 6 {
                HeaderLength::NeedMore(6)
            } else {
                HeaderLength::Length(IPV6_HEADER + u16::from_be_bytes([bytes[4], bytes[5]]) as usize)
            }
        }
        _ => HeaderLength::BadVersion,
    }
}

/// Whether a header prefix declares a length the simulator can carry.
///
/// Requires the declared length to be in `20..=65535` and, for IPv4, to be
/// consistent with the header length field.
pub(crate) fn plausible_header(bytes: &[u8]) -> Option<HeaderLength> {
    match packet_len_from_header(bytes) {
        HeaderLength::NeedMore(n) => Some(HeaderLength::NeedMore(n)),
        HeaderLength::BadVersion => None,
        HeaderLength::Length(len) => {
            if !(IPV4_MIN_HEADER..=MAX_PACKET_LEN).contains(&len) {
                return None;
            }
            if bytes[0] >> 4 == 4 {
                let ihl = (bytes[0] & 0x0f) as usize * 4;
                if ihl < IPV4_MIN_HEADER || ihl > len {
                    return None;
                }
            } else if len < IPV6_HEADER {
                return None;
            }
            Some(HeaderLength::Length(len))
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PacketError {
    #[error("unknown IP version nibble {0}")]
    BadVersion(u8),
    #[error("packet truncated: have {have} bytes, need {need}")]
    Truncated { have: usize, need: usize },
    #[error("header declares {declared} bytes but {actual} were supplied")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("implausible header (declared length {0})")]
    Implausible(usize),
    #[error("empty packet")]
    Empty,
}

/// A raw IP packet with its addresses pre-parsed.
///
/// The byte buffer is shared, so cloning is cheap. Equality compares bytes
/// only; ingress metadata is ignored.
#[derive(Clone)]
pub struct Packet {
    bytes: Arc<[u8]>,
    src: IpAddr,
    dst: IpAddr,
    ingress_time: SimTime,
}

impl Packet {
    /// Parse a complete packet. The declared length must match exactly.
    pub fn parse(bytes: impl Into<Arc<[u8]>>) -> Result<Packet, PacketError> {
        let bytes: Arc<[u8]> = bytes.into();
        if bytes.is_empty() {
            return Err(PacketError::Empty);
        }
        let declared = match plausible_header(&bytes) {
            None => match packet_len_from_header(&bytes) {
                HeaderLength::BadVersion => return Err(PacketError::BadVersion(bytes[0] >> 4)),
                HeaderLength::Length(n) => return Err(PacketError::Implausible(n)),
                HeaderLength::NeedMore(_) => unreachable!("plausible_header passes NeedMore through"),
            },
            Some(HeaderLength::NeedMore(need)) => return Err(PacketError::Truncated { have: bytes.len(), need }),
            Some(HeaderLength::BadVersion) => unreachable!(),
            Some(HeaderLength::Length(n)) => n,
        };
        if declared != bytes.len() {
            return Err(PacketError::LengthMismatch { declared, actual: bytes.len() });
        }
        let (src, dst) = if bytes[0] >> 4 == 4 {
            (
                IpAddr::V4(Ipv4Addr::new(bytes[12], bytes[13], bytes[14], bytes[15])),
                IpAddr::V4(Ipv4Addr::new(bytes[16], bytes[17], bytes[18], bytes[19])),
            )
        } else {
            let mut s = [0u8; 16];
            let mut d = [0u8; 16];
            s.copy_from_slice(&bytes[8..24]);
            d.copy_from_slice(&bytes[24..40]);
            (IpAddr::V6(Ipv6Addr::from(s)), IpAddr::V6(Ipv6Addr::from(d)))
        };
        Ok(Packet { bytes, src, dst, ingress_time: SimTime::ZERO })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn shared_bytes(&self) -> Arc<[u8]> {
        self.bytes.clone()
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn src(&self) -> IpAddr {
        self.src
    }

    pub fn dst(&self) -> IpAddr {
        self.dst
    }

    pub fn version(&self) -> u8 {
        self.bytes[0] >> 4
    }

    pub fn ingress_time(&self) -> SimTime {
        self.ingress_time
    }

    pub fn with_ingress_time(mut self, t: SimTime) -> Self {
        self.ingress_time = t;
        self
    }

    /// IPv4 protocol number or IPv6 next header.
    pub fn protocol(&self) -> u8 {
        if self.version() == 4 {
            self.bytes[9]
        } else {
            self.bytes[6]
        }
    }

    /// Transport payload (everything after the IP header).
    pub fn ip_payload(&self) -> &[u8] {
        if self.version() == 4 {
            let ihl = (self.bytes[0] & 0x0f) as usize * 4;
            &self.bytes[ihl..]
        } else {
            &self.bytes[IPV6_HEADER..]
        }
    }
}

impl PartialEq for Packet {
    fn eq(&self, other: &Self) -> bool {
        self.bytes == other.bytes
    }
}

impl Eq for Packet {}

impl fmt::Debug for Packet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Packet")
            .field("src", &self.src)
            .field("dst", &self.dst)
            .field("len", &self.bytes.len())
            .field("proto", &self.protocol())
            .finish()
    }
}
