//! The app control channel: one JSON object per line on the app's stdin
//! (a [`Tick`]) answered by exactly one line on its stdout (a [`Reply`]).
//!
//! Readings and setpoints are flat `name -> number` maps. An app that has
//! nothing to say answers `{}`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub type Values = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tick {
    /// Simulated time in ms.
    pub t: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub readings: Values,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub commands: Vec<Command>,
}

/// Measurement orders understood by the bundled client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Send `count` echo requests at once; report when all replies are in
    /// or `timeout_ms` has passed.
    Ping { repeat: u32, count: u32, timeout_ms: u64 },
    /// Push `bytes` to the peer with a go-back-N window of `window`
    /// segments; fail once no data is acknowledged for `timeout_ms`.
    Bulk { repeat: u32, bytes: u32, window: u32, timeout_ms: u64, rto_ms: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub setpoints: Values,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<Value>,
    /// Next time the app wants a tick even without traffic or commands.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wake: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    PingDone { repeat: u32, sent: u32, replies: u32, corrupt: u32 },
    BulkDone { repeat: u32, ok: bool, acked: u32 },
    /// Bulk segments whose payload did not match what was sent.
    BulkCorrupt { repeat: u32, segments: u32 },
    /// Reply to a periodic ping.
    Echo { seq: u16, ok: bool },
}

impl Event {
    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("plain data")
    }

    pub fn from_value(v: &Value) -> Option<Event> {
        serde_json::from_value(v.clone()).ok()
    }
}

/// Readings arrive from the grid as objects; anything numeric is kept.
pub fn readings_from_value(v: &Value) -> Values {
    let mut out = Values::new();
    if let Value::Object(m) = v {
        for (k, x) in m {
            if let Some(f) = x.as_f64() {
                out.insert(k.clone(), f);
            }
        }
    }
    out
}
