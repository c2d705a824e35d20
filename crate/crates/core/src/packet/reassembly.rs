//! Turns an in-order stream of byte chunks back into whole IP packets.
//!
//! Chunk boundaries carry no meaning. Packet boundaries are recovered only
//! from the length fields of the IP headers, so the stream must start at a
//! packet boundary and must not lose bytes. When a header at a packet
//! boundary is not plausible the buffer is resynchronized by discarding bytes
//! until a plausible header appears.

use super::{plausible_header, HeaderLength, Packet};

/// Upper bound on buffered, not yet assembled bytes.
pub const FRAME_BUFFER_LIMIT: usize = 128 * 1024;

#[derive(Debug, Default, Clone)]
pub struct FrameBuffer {
    pending: Vec<u8>,
    expected_len: Option<usize>,
    in_desync: bool,
    desyncs: u64,
    discarded: u64,
}

impl FrameBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a chunk and return every packet it completes, in stream order.
    pub fn feed(&mut self, chunk: &[u8]) -> Vec<Packet> {
        self.pending.extend_from_slice(chunk);
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < self.pending.len() {
            let rest = &self.pending[pos..];
            match plausible_header(rest) {
                Some(HeaderLength::NeedMore(_)) => break,
                Some(HeaderLength::Length(len)) => {
                    if rest.len() < len {
                        break;
                    }
                    let packet = Packet::parse(rest[..len].to_vec()).expect("plausible header with full length parses");
                    out.push(packet);
                    pos += len;
                    self.in_desync = false;
                }
                Some(HeaderLength::BadVersion) | None => {
                    if !self.in_desync {
                        self.in_desync = true;
                        self.desyncs += 1;
                        log::warn!("packet stream desynchronized, scanning for next header");
                    }
                    pos += 1;
                    self.discarded += 1;
                }
            }
        }
        self.pending.drain(..pos);

        if self.pending.len() > FRAME_BUFFER_LIMIT {
            self.discarded += self.pending.len() as u64;
            self.pending.clear();
            self.desyncs += 1;
        }
        self.expected_len = match plausible_header(&self.pending) {
            Some(HeaderLength::Length(n)) if !self.pending.is_empty() => Some(n),
            _ => None,
        };
        out
    }

    /// Bytes held back waiting for the rest of a packet.
    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    /// Declared length of the partially received packet, once its header is in.
    pub fn expected_len(&self) -> Option<usize> {
        self.expected_len
    }

    /// Number of times the stream lost packet alignment.
    pub fn desyncs(&self) -> u64 {
        self.desyncs
    }

    /// Bytes thrown away while resynchronizing.
    pub fn discarded(&self) -> u64 {
        self.discarded
    }

    pub fn reset(&mut self) {
        self.pending.clear();
        self.expected_len = None;
        self.in_desync = false;
    }
}
