//! Toy radial grid standing in for a power-flow engine.
//!
//! Every bus hangs off one feeding line (from its parent bus, or from the
//! feeder for a root bus). A line carries the net load of the subtree below
//! it. The bus voltage is a non-physical surrogate:
//! `v_pu = max(0.9, 1 - 0.01 * loading)` where `loading = |flow| / capacity`
//! of the feeding line. Its only purpose is to give applications readings
//! that react to their setpoints.

use std::any::Any;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::kernel::{DataRequest, EntityInfo, Inputs, ModelMeta, Outputs, SimError, SimMeta, Simulator};
use crate::time::SimTime;

pub const BUS_MODEL: &str = "Bus";
pub const V_PU_FLOOR: f64 = 0.9;
pub const V_PU_DROP_PER_LOADING: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusSpec {
    pub id: String,
    pub base_load_kw: f64,
    #[serde(default)]
    pub parent: Option<String>,
    /// Capacity of the line feeding this bus.
    pub line_capacity_kw: f64,
    #[serde(default)]
    pub attached_apps: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub buses: Vec<BusSpec>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("unknown bus {0:?}")]
    UnknownBus(String),
    #[error("duplicate bus {0:?}")]
    DuplicateBus(String),
    #[error("bus {0:?}: base load must be finite and >= 0")]
    BadLoad(String),
    #[error("bus {0:?}: line capacity must be finite and > 0")]
    BadCapacity(String),
    #[error("bus {0:?} is part of a loop; the grid must be radial")]
    NotRadial(String),
    #[error("bus {0:?}: setpoint must be finite")]
    BadSetpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Reading {
    pub v_pu: f64,
    pub p_kw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridState {
    pub readings: BTreeMap<String, Reading>,
    /// Loading of the line feeding each bus.
    pub loadings: BTreeMap<String, f64>,
    /// Flow on the line feeding each bus, kW.
    pub flows: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
struct Bus {
    id: String,
    net_kw: f64,
    parent: Option<usize>,
    capacity_kw: f64,
}

#[derive(Debug, Clone)]
pub struct Grid {
    buses: Vec<Bus>,
    index: HashMap<String, usize>,
    // Leaves first: every bus appears before its parent.
    upward: Vec<usize>,
}

impl Grid {
    pub fn build(spec: &GridSpec) -> Result<Grid, GridError> {
        let mut index = HashMap::new();
        for (i, b) in spec.buses.iter().enumerate() {
            if index.insert(b.id.clone(), i).is_some() {
                return Err(GridError::DuplicateBus(b.id.clone()));
            }
            if !b.base_load_kw.is_finite() || b.base_load_kw < 0.0 {
                return Err(GridError::BadLoad(b.id.clone()));
            }
            if !b.line_capacity_kw.is_finite() || b.line_capacity_kw <= 0.0 {
                return Err(GridError::BadCapacity(b.id.clone()));
            }
        }
        let mut buses = Vec::with_capacity(spec.buses.len());
        for b in &spec.buses {
            let parent = match &b.parent {
                None => None,
                Some(p) => Some(*index.get(p).ok_or_else(|| GridError::UnknownBus(p.clone()))?),
            };
            buses.push(Bus { id: b.id.clone(), net_kw: b.base_load_kw, parent, capacity_kw: b.line_capacity_kw });
        }

        let depth = |mut i: usize| -> Result<usize, GridError> {
            let mut d = 0;
            while let Some(p) = buses[i].parent {
                d += 1;
                if d > buses.len() {
                    return Err(GridError::NotRadial(buses[i].id.clone()));
                }
                i = p;
            }
            Ok(d)
        };
        let mut depths = Vec::with_capacity(buses.len());
        for i in 0..buses.len() {
            depths.push((depth(i)?, i));
        }
        depths.sort_by(|a, b| b.cmp(a));
        let upward = depths.into_iter().map(|(_, i)| i).collect();
        Ok(Grid { buses, index, upward })
    }

    pub fn bus_ids(&self) -> impl Iterator<Item = &str> {
        self.buses.iter().map(|b| b.id.as_str())
    }

    pub fn contains(&self, bus: &str) -> bool {
        self.index.contains_key(bus)
    }

    /// Add power deltas (kW) to bus loads. Nothing is applied if any bus is
    /// unknown.
    pub fn apply_setpoints(&mut self, deltas: &BTreeMap<String, f64>) -> Result<(), GridError> {
        for (bus, d) in deltas {
            if !self.index.contains_key(bus) {
                return Err(GridError::UnknownBus(bus.clone()));
            }
            if !d.is_finite() {
                return Err(GridError::BadSetpoint(bus.clone()));
            }
        }
        for (bus, d) in deltas {
            self.buses[self.index[bus]].net_kw += d;
        }
        Ok(())
    }

    pub fn state(&self) -> GridState {
        let mut flow: Vec<f64> = self.buses.iter().map(|b| b.net_kw).collect();
        for &i in &self.upward {
            if let Some(p) = self.buses[i].parent {
                flow[p] += flow[i];
            }
        }
        let mut out = GridState { readings: BTreeMap::new(), loadings: BTreeMap::new(), flows: BTreeMap::new() };
        for (i, b) in self.buses.iter().enumerate() {
            let loading = flow[i].abs() / b.capacity_kw;
            let v_pu = (1.0 - V_PU_DROP_PER_LOADING * loading).max(V_PU_FLOOR);
            out.readings.insert(b.id.clone(), Reading { v_pu, p_kw: b.net_kw });
            out.loadings.insert(b.id.clone(), loading);
            out.flows.insert(b.id.clone(), flow[i]);
        }
        out
    }
}

/// Kernel adapter: one `Bus` entity per bus with a `setpoint` input
/// (`{"p_kw": delta}` objects or plain numbers, summed over sources) and a
/// `reading` output (`{"v_pu": .., "p_kw": ..}`).
pub struct GridSimulator {
    grid: Grid,
    entities: BTreeMap<String, String>,
    state: GridState,
}

impl GridSimulator {
    pub fn new(grid: Grid) -> Self {
        let state = grid.state();
        GridSimulator { grid, entities: BTreeMap::new(), state }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn state(&self) -> &GridState {
        &self.state
    }
}

fn setpoint_kw(v: &Value) -> Result<Option<f64>, SimError> {
    match v {
        Value::Null => Ok(None),
        Value::Number(n) => Ok(n.as_f64()),
        Value::Object(m) => match m.get("p_kw") {
            None | Some(Value::Null) => Ok(None),
            Some(Value::Number(n)) => Ok(n.as_f64()),
            Some(other) => Err(SimError::Failed(format!("p_kw must be a number, got {other}"))),
        },
        other => Err(SimError::Failed(format!("unsupported setpoint value {other}"))),
    }
}

impl Simulator for GridSimulator {
    fn init(&mut self, _sid: &str, _params: &Map<String, Value>) -> Result<SimMeta, SimError> {
        let mut meta = SimMeta::default();
        meta.models.insert(BUS_MODEL.into(), ModelMeta::new(&["bus"], &["setpoint"], &["reading"]));
        Ok(meta)
    }

    fn create(&mut self, num: usize, model: &str, params: &Map<String, Value>) -> Result<Vec<EntityInfo>, SimError> {
        if model != BUS_MODEL || num != 1 {
            return Err(SimError::Failed(format!("create {num} x {model:?}: expected one {BUS_MODEL}")));
        }
        let bus = params
            .get("bus")
            .and_then(Value::as_str)
            .ok_or_else(|| SimError::Failed("missing string parameter \"bus\"".into()))?;
        if !self.grid.contains(bus) {
            return Err(SimError::Failed(GridError::UnknownBus(bus.into()).to_string()));
        }
        if self.entities.insert(bus.to_string(), bus.to_string()).is_some() {
            return Err(SimError::Failed(format!("entity {bus} already exists")));
        }
        Ok(vec![EntityInfo { eid: bus.to_string(), model: BUS_MODEL.into() }])
    }

    fn step(&mut self, _t: SimTime, inputs: &Inputs) -> Result<(), SimError> {
        let mut deltas = BTreeMap::new();
        for (eid, attrs) in inputs {
            let bus = self.entities.get(eid).ok_or_else(|| SimError::Failed(format!("unknown entity {eid}")))?;
            for v in attrs.get("setpoint").into_iter().flat_map(|m| m.values()) {
                if let Some(kw) = setpoint_kw(v)? {
                    *deltas.entry(bus.clone()).or_insert(0.0) += kw;
                }
            }
        }
        self.grid.apply_setpoints(&deltas).map_err(|e| SimError::Failed(e.to_string()))?;
        self.state = self.grid.state();
        Ok(())
    }

    fn get_data(&mut self, request: &DataRequest) -> Result<Outputs, SimError> {
        let mut out = Outputs::new();
        for (eid, attrs) in request {
            let bus = self.entities.get(eid).ok_or_else(|| SimError::Failed(format!("unknown entity {eid}")))?;
            for attr in attrs {
                if attr != "reading" {
                    return Err(SimError::Failed(format!("{eid} has no output {attr:?}")));
                }
                let r = self.state.readings[bus];
                out.entry(eid.clone()).or_default().insert(attr.clone(), json!({"v_pu": r.v_pu, "p_kw": r.p_kw}));
            }
        }
        Ok(out)
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
