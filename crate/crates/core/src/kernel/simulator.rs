use std::any::Any;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::time::SimTime;

/// `eid -> attr -> source full id -> value`
pub type Inputs = BTreeMap<String, BTreeMap<String, BTreeMap<String, Value>>>;
/// `eid -> attr -> value`
pub type Outputs = BTreeMap<String, BTreeMap<String, Value>>;
/// `eid -> requested attrs`
pub type DataRequest = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    #[serde(default = "yes")]
    pub public: bool,
    #[serde(default)]
    pub params: Vec<String>,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<String>,
}

fn yes() -> bool {
    true
}

impl ModelMeta {
    pub fn new(params: &[&str], inputs: &[&str], outputs: &[&str]) -> Self {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        ModelMeta { public: true, params: v(params), inputs: v(inputs), outputs: v(outputs) }
    }
}

/// What a simulator declares in reply to `init`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimMeta {
    pub models: BTreeMap<String, ModelMeta>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityInfo {
    pub eid: String,
    #[serde(rename = "type")]
    pub model: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("{0}")]
    Remote(String),
    #[error("simulator connection lost: {0}")]
    Disconnected(String),
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("{0}")]
    Failed(String),
}

/// One co-simulation participant.
///
/// Each step the kernel calls `step` once and then `get_data` once. The
/// split-phase `start_*`/`finish_*` pairs let the kernel overlap round trips
/// of independent simulators; in-process simulators keep the defaults.
pub trait Simulator {
    fn init(&mut self, sid: &str, params: &Map<String, Value>) -> Result<SimMeta, SimError>;

    fn create(&mut self, num: usize, model: &str, params: &Map<String, Value>) -> Result<Vec<EntityInfo>, SimError>;

    fn setup_done(&mut self) -> Result<(), SimError> {
        Ok(())
    }

    fn step(&mut self, t: SimTime, inputs: &Inputs) -> Result<(), SimError>;

    fn get_data(&mut self, request: &DataRequest) -> Result<Outputs, SimError>;

    fn stop(&mut self) -> Result<(), SimError> {
        Ok(())
    }

    fn start_step(&mut self, t: SimTime, inputs: &Inputs) -> Result<(), SimError> {
        self.step(t, inputs)
    }

    fn finish_step(&mut self) -> Result<(), SimError> {
        Ok(())
    }

    /// Returns the outputs right away, or `None` if `finish_get_data` must
    /// be called to collect them.
    fn start_get_data(&mut self, request: &DataRequest) -> Result<Option<Outputs>, SimError> {
        self.get_data(request).map(Some)
    }

    fn finish_get_data(&mut self) -> Result<Outputs, SimError> {
        Err(SimError::Protocol("no get_data in progress".into()))
    }

    fn as_any_mut(&mut self) -> &mut dyn Any;
}
