//! Length-prefixed request/reply framing for out-of-process simulators.
//!
//! A frame is a 4-byte big-endian body length followed by a UTF-8 JSON body
//! `[kind, id, payload]`. Requests carry `[method, args, kwargs]` as payload,
//! successes carry the result and errors carry a message string.

use serde_json::{json, Map, Value};
use thiserror::Error;

pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;
const HEADER_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsgKind {
    Request = 0,
    Success = 1,
    Error = 2,
}

impl MsgKind {
    fn from_u64(v: u64) -> Option<MsgKind> {
        match v {
            0 => Some(MsgKind::Request),
            1 => Some(MsgKind::Success),
            2 => Some(MsgKind::Error),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub kind: MsgKind,
    pub id: u64,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub method: String,
    pub args: Vec<Value>,
    pub kwargs: Map<String, Value>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("frame of {0} bytes exceeds the 16 MiB limit")]
    FrameTooLarge(usize),
    #[error("malformed message: {0}")]
    Malformed(String),
}

impl WireMessage {
    pub fn request(id: u64, method: &str, args: Vec<Value>, kwargs: Map<String, Value>) -> Self {
        WireMessage { kind: MsgKind::Request, id, payload: json!([method, args, kwargs]) }
    }

    pub fn success(id: u64, result: Value) -> Self {
        WireMessage { kind: MsgKind::Success, id, payload: result }
    }

    pub fn error(id: u64, message: impl Into<String>) -> Self {
        WireMessage { kind: MsgKind::Error, id, payload: Value::String(message.into()) }
    }

    /// Interpret the payload of a REQUEST.
    pub fn as_request(&self) -> Result<Request, WireError> {
        let bad = |m: &str| WireError::Malformed(m.to_string());
        if self.kind != MsgKind::Request {
            return Err(bad("not a request"));
        }
        let Value::Array(parts) = &self.payload else { return Err(bad("request payload is not an array")) };
        match parts.as_slice() {
            [Value::String(method), Value::Array(args), Value::Object(kwargs)] => {
                Ok(Request { method: method.clone(), args: args.clone(), kwargs: kwargs.clone() })
            }
            _ => Err(bad("request payload must be [method, args, kwargs]")),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let body = serde_json::to_vec(&json!([self.kind as u8, self.id, self.payload]))
            .map_err(|e| WireError::Malformed(e.to_string()))?;
        if body.len() > MAX_FRAME_LEN {
            return Err(WireError::FrameTooLarge(body.len()));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + body.len());
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
        Ok(out)
    }

    fn from_body(body: &[u8]) -> Result<WireMessage, WireError> {
        let v: Value = serde_json::from_slice(body).map_err(|e| WireError::Malformed(e.to_string()))?;
        let Value::Array(mut parts) = v else { return Err(WireError::Malformed("body is not an array".into())) };
        if parts.len() != 3 {
            return Err(WireError::Malformed(format!("expected 3 elements, got {}", parts.len())));
        }
        let payload = parts.pop().expect("len 3");
        let id = parts[1].as_u64().ok_or_else(|| WireError::Malformed("request id is not an unsigned integer".into()))?;
        let kind = parts[0]
            .as_u64()
            .and_then(MsgKind::from_u64)
            .ok_or_else(|| WireError::Malformed(format!("unknown message kind {}", parts[0])))?;
        if kind == MsgKind::Error && !payload.is_string() {
            return Err(WireError::Malformed("error payload must be a string".into()));
        }
        Ok(WireMessage { kind, id, payload })
    }
}

/// Decode one frame from the front of `buf`.
///
/// `Ok(None)` means the frame is incomplete; otherwise the message and the
/// number of bytes consumed are returned.
pub fn decode_frame(buf: &[u8]) -> Result<Option<(WireMessage, usize)>, WireError> {
    if buf.len() < HEADER_LEN {
        return Ok(None);
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(len));
    }
    if buf.len() < HEADER_LEN + len {
        return Ok(None);
    }
    let msg = WireMessage::from_body(&buf[HEADER_LEN..HEADER_LEN + len])?;
    Ok(Some((msg, HEADER_LEN + len)))
}

/// Streaming decoder for frames arriving in arbitrary pieces.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn feed(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    pub fn next_message(&mut self) -> Result<Option<WireMessage>, WireError> {
        match decode_frame(&self.buf)? {
            None => Ok(None),
            Some((msg, used)) => {
                self.buf.drain(..used);
                Ok(Some(msg))
            }
        }
    }
}
