//! Base64 transport encoding of packets for the co-simulation protocol.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use thiserror::Error;

use super::{Packet, PacketError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("entry {index}: invalid Base64: {reason}")]
    Base64 { index: usize, reason: String },
    #[error("entry {index}: {source}")]
    Packet { index: usize, source: PacketError },
}

impl CodecError {
    pub fn index(&self) -> usize {
        match self {
            CodecError::Base64 { index, .. } | CodecError::Packet { index, .. } => *index,
        }
    }
}

pub fn encode_packet_b64(packet: &Packet) -> String {
    STANDARD.encode(packet.bytes())
}

/// One standard-alphabet, padded Base64 string per packet.
pub fn encode_packets_b64(packets: &[Packet]) -> Vec<String> {
    packets.iter().map(encode_packet_b64).collect()
}

pub fn decode_packets_b64<S: AsRef<str>>(encoded: &[S]) -> Result<Vec<Packet>, CodecError> {
    encoded
        .iter()
        .enumerate()
        .map(|(index, s)| {
            let bytes = STANDARD
                .decode(s.as_ref())
                .map_err(|e| CodecError::Base64 { index, reason: e.to_string() })?;
            Packet::parse(bytes).map_err(|source| CodecError::Packet { index, source })
        })
        .collect()
}
