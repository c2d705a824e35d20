use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use super::simulator::{DataRequest, Inputs, Outputs, SimError, SimMeta, Simulator};
use crate::time::SimTime;

/// An entity addressed by simulator name and entity path.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct EntityRef {
    pub sim: String,
    pub eid: String,
}

impl EntityRef {
    pub fn new(sim: impl Into<String>, eid: impl Into<String>) -> Self {
        EntityRef { sim: sim.into(), eid: eid.into() }
    }

    pub fn full_id(&self) -> String {
        format!("{}.{}", self.sim, self.eid)
    }
}

impl fmt::Display for EntityRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.sim, self.eid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Connection {
    pub src: EntityRef,
    pub src_attr: String,
    pub dst: EntityRef,
    pub dst_attr: String,
    pub time_shifted: bool,
    pub initial_data: Option<Value>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("simulator name {0:?} already registered")]
    DuplicateSimulator(String),
    #[error("unknown simulator {0:?}")]
    UnknownSimulator(String),
    #[error("unknown entity {0}")]
    UnknownEntity(EntityRef),
    #[error("simulator {sim:?} has no model {model:?}")]
    UnknownModel { sim: String, model: String },
    #[error("entity {entity} has no {direction} attribute {attr:?}")]
    UnknownAttribute { entity: EntityRef, attr: String, direction: &'static str },
    #[error("connecting {src} -> {dst} would create a cycle without a time shift")]
    Cycle { src: EntityRef, dst: EntityRef },
    #[error("time-shifted connection needs initial data")]
    MissingInitialData,
    #[error("initial data is only allowed on time-shifted connections")]
    UnexpectedInitialData,
    #[error("simulator {sim:?}: {source}")]
    Sim { sim: String, source: SimError },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SimStats {
    pub steps: u64,
    pub polls: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunReport {
    pub steps: u64,
    pub exchanges: u64,
    pub now: SimTime,
    pub sims: BTreeMap<String, SimStats>,
}

#[derive(Debug, Error)]
#[error("run aborted at t={} ms: simulator {simulator:?} failed: {error}", report.now)]
pub struct RunAborted {
    pub report: RunReport,
    pub simulator: String,
    pub error: SimError,
}

struct Slot {
    name: String,
    sim: Box<dyn Simulator>,
    meta: SimMeta,
    entities: BTreeMap<String, String>,
    stats: SimStats,
}

/// Lockstep co-simulation world with 1 ms steps.
pub struct World {
    slots: Vec<Slot>,
    index: HashMap<String, usize>,
    edges: Vec<Connection>,
    // Value each time-shifted edge delivers at the next step.
    shifted: Vec<Option<Value>>,
    groups: Option<Vec<Vec<usize>>>,
    now: SimTime,
    steps: u64,
    exchanges: u64,
    setup_done: bool,
}

impl Default for World {
    fn default() -> Self {
        Self::new()
    }
}

impl World {
    pub fn new() -> World {
        World {
            slots: Vec::new(),
            index: HashMap::new(),
            edges: Vec::new(),
            shifted: Vec::new(),
            groups: None,
            now: SimTime::ZERO,
            steps: 0,
            exchanges: 0,
            setup_done: false,
        }
    }

    /// Register and initialize a simulator.
    pub fn register(
        &mut self,
        name: &str,
        mut sim: Box<dyn Simulator>,
        params: &Map<String, Value>,
    ) -> Result<&SimMeta, KernelError> {
        if self.index.contains_key(name) {
            return Err(KernelError::DuplicateSimulator(name.to_string()));
        }
        let meta = sim.init(name, params).map_err(|source| KernelError::Sim { sim: name.to_string(), source })?;
        self.index.insert(name.to_string(), self.slots.len());
        self.slots.push(Slot {
            name: name.to_string(),
            sim,
            meta,
            entities: BTreeMap::new(),
            stats: SimStats::default(),
        });
        self.groups = None;
        Ok(&self.slots.last().expect("just pushed").meta)
    }

    fn slot_idx(&self, name: &str) -> Result<usize, KernelError> {
        self.index.get(name).copied().ok_or_else(|| KernelError::UnknownSimulator(name.to_string()))
    }

    pub fn meta(&self, sim: &str) -> Result<&SimMeta, KernelError> {
        Ok(&self.slots[self.slot_idx(sim)?].meta)
    }

    pub fn create(
        &mut self,
        sim: &str,
        num: usize,
        model: &str,
        params: &Map<String, Value>,
    ) -> Result<Vec<EntityRef>, KernelError> {
        let idx = self.slot_idx(sim)?;
        let slot = &mut self.slots[idx];
        if !slot.meta.models.contains_key(model) {
            return Err(KernelError::UnknownModel { sim: sim.to_string(), model: model.to_string() });
        }
        let created = slot
            .sim
            .create(num, model, params)
            .map_err(|source| KernelError::Sim { sim: sim.to_string(), source })?;
        let mut out = Vec::with_capacity(created.len());
        for e in created {
            slot.entities.insert(e.eid.clone(), e.model);
            out.push(EntityRef::new(sim, e.eid));
        }
        Ok(out)
    }

    pub fn entities(&self, sim: &str) -> Result<impl Iterator<Item = (&str, &str)>, KernelError> {
        Ok(self.slots[self.slot_idx(sim)?].entities.iter().map(|(e, m)| (e.as_str(), m.as_str())))
    }

    fn check_attr(&self, e: &EntityRef, attr: &str, output: bool) -> Result<(), KernelError> {
        let slot = &self.slots[self.slot_idx(&e.sim)?];
        let model = slot.entities.get(&e.eid).ok_or_else(|| KernelError::UnknownEntity(e.clone()))?;
        let meta = &slot.meta.models[model];
        let list = if output { &meta.outputs } else { &meta.inputs };
        if list.iter().any(|a| a == attr) {
            Ok(())
        } else {
            Err(KernelError::UnknownAttribute {
                entity: e.clone(),
                attr: attr.to_string(),
                direction: if output { "output" } else { "input" },
            })
        }
    }

    /// Whether `to` is reachable from `from` over non-shifted edges.
    fn reaches(&self, from: usize, to: usize) -> bool {
        let mut seen = vec![false; self.slots.len()];
        let mut stack = vec![from];
        while let Some(n) = stack.pop() {
            if n == to {
                return true;
            }
            if std::mem::replace(&mut seen[n], true) {
                continue;
            }
            for e in self.edges.iter().filter(|e| !e.time_shifted) {
                if self.index[&e.src.sim] == n {
                    stack.push(self.index[&e.dst.sim]);
                }
            }
        }
        false
    }

    /// Add a dataflow edge `src.out -> dst.in`.
    ///
    /// A time-shifted edge delivers the value produced at step `t - 1` and
    /// `initial_data` at the first step. Ordering is tracked per simulator,
    /// so a non-shifted edge between two entities of one simulator counts as
    /// a cycle.
    pub fn connect(
        &mut self,
        src: &EntityRef,
        dst: &EntityRef,
        attrs: (&str, &str),
        time_shifted: bool,
        initial_data: Option<Value>,
    ) -> Result<(), KernelError> {
        self.check_attr(src, attrs.0, true)?;
        self.check_attr(dst, attrs.1, false)?;
        match (time_shifted, initial_data.is_some()) {
            (true, false) => return Err(KernelError::MissingInitialData),
            (false, true) => return Err(KernelError::UnexpectedInitialData),
            _ => {}
        }
        if !time_shifted {
            let (s, d) = (self.index[&src.sim], self.index[&dst.sim]);
            if self.reaches(d, s) {
                return Err(KernelError::Cycle { src: src.clone(), dst: dst.clone() });
            }
        }
        self.shifted.push(initial_data.clone());
        self.edges.push(Connection {
            src: src.clone(),
            src_attr: attrs.0.to_string(),
            dst: dst.clone(),
            dst_attr: attrs.1.to_string(),
            time_shifted,
            initial_data,
        });
        self.groups = None;
        Ok(())
    }

    pub fn connections(&self) -> &[Connection] {
        &self.edges
    }

    /// Step groups: each simulator is placed one level after its latest
    /// non-shifted predecessor; within a level, registration order. The
    /// members of a level never feed each other within a step.
    pub fn step_groups(&mut self) -> Vec<Vec<String>> {
        let groups = self.groups().clone();
        groups
            .iter()
            .map(|g| g.iter().map(|&i| self.slots[i].name.clone()).collect())
            .collect()
    }

    fn groups(&mut self) -> &Vec<Vec<usize>> {
        if self.groups.is_none() {
            let n = self.slots.len();
            let mut indeg = vec![0usize; n];
            let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
            for e in self.edges.iter().filter(|e| !e.time_shifted) {
                let (s, d) = (self.index[&e.src.sim], self.index[&e.dst.sim]);
                succ[s].push(d);
                indeg[d] += 1;
            }
            let mut level = vec![0usize; n];
            let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
            while let Some(i) = ready.pop() {
                for &d in &succ[i] {
                    level[d] = level[d].max(level[i] + 1);
                    indeg[d] -= 1;
                    if indeg[d] == 0 {
                        ready.push(d);
                    }
                }
            }
            let depth = level.iter().copied().max().map_or(0, |m| m + 1);
            let mut groups = vec![Vec::new(); depth];
            for (i, &l) in level.iter().enumerate() {
                groups[l].push(i);
            }
            self.groups = Some(groups);
        }
        self.groups.as_ref().expect("computed above")
    }

    pub fn setup_done(&mut self) -> Result<(), KernelError> {
        if self.setup_done {
            return Ok(());
        }
        for slot in &mut self.slots {
            slot.sim.setup_done().map_err(|source| KernelError::Sim { sim: slot.name.clone(), source })?;
        }
        self.setup_done = true;
        Ok(())
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn report(&self) -> RunReport {
        RunReport {
            steps: self.steps,
            exchanges: self.exchanges,
            now: self.now,
            sims: self.slots.iter().map(|s| (s.name.clone(), s.stats.clone())).collect(),
        }
    }

    fn abort(&self, sim: usize, error: SimError) -> RunAborted {
        RunAborted { report: self.report(), simulator: self.slots[sim].name.clone(), error }
    }

    /// Run one 1 ms step at the current time.
    pub fn step_once(&mut self) -> Result<(), RunAborted> {
        if !self.setup_done {
            if let Err(KernelError::Sim { sim, source }) = self.setup_done() {
                let idx = self.index[&sim];
                return Err(self.abort(idx, source));
            }
        }
        let t = self.now;
        let groups = self.groups().clone();
        let mut current: HashMap<(usize, &str, &str), Value> = HashMap::new();
        let edges = std::mem::take(&mut self.edges);
        let result = (|| {
            for group in &groups {
                let mut requests = Vec::with_capacity(group.len());
                for &i in group {
                    let mut inputs = Inputs::new();
                    for (k, e) in edges.iter().enumerate().filter(|(_, e)| self.index[&e.dst.sim] == i) {
                        let value = if e.time_shifted {
                            self.shifted[k].clone().unwrap_or(Value::Null)
                        } else {
                            let s = self.index[&e.src.sim];
                            current.get(&(s, e.src.eid.as_str(), e.src_attr.as_str())).cloned().unwrap_or(Value::Null)
                        };
                        inputs
                            .entry(e.dst.eid.clone())
                            .or_default()
                            .entry(e.dst_attr.clone())
                            .or_default()
                            .insert(e.src.full_id(), value);
                        self.exchanges += 1;
                    }
                    self.slots[i].sim.start_step(t, &inputs).map_err(|err| (i, err))?;

                    let mut request = DataRequest::new();
                    for e in edges.iter().filter(|e| self.index[&e.src.sim] == i) {
                        let attrs = request.entry(e.src.eid.clone()).or_default();
                        if !attrs.contains(&e.src_attr) {
                            attrs.push(e.src_attr.clone());
                        }
                    }
                    requests.push(request);
                }
                for &i in group {
                    self.slots[i].sim.finish_step().map_err(|err| (i, err))?;
                    self.slots[i].stats.steps += 1;
                }
                let mut ready: Vec<Option<Outputs>> = Vec::with_capacity(group.len());
                for (&i, request) in group.iter().zip(&requests) {
                    ready.push(self.slots[i].sim.start_get_data(request).map_err(|err| (i, err))?);
                    self.slots[i].stats.polls += 1;
                }
                for (&i, out) in group.iter().zip(ready) {
                    let out = match out {
                        Some(o) => o,
                        None => self.slots[i].sim.finish_get_data().map_err(|err| (i, err))?,
                    };
                    for e in edges.iter().filter(|e| self.index[&e.src.sim] == i) {
                        let v = out.get(&e.src.eid).and_then(|m| m.get(&e.src_attr)).cloned().unwrap_or(Value::Null);
                        current.insert((i, e.src.eid.as_str(), e.src_attr.as_str()), v);
                    }
                }
            }
            Ok(())
        })();
        if result.is_ok() {
            for (k, e) in edges.iter().enumerate().filter(|(_, e)| e.time_shifted) {
                let s = self.index[&e.src.sim];
                let v = current.get(&(s, e.src.eid.as_str(), e.src_attr.as_str())).cloned().unwrap_or(Value::Null);
                self.shifted[k] = Some(v);
            }
        }
        drop(current);
        self.edges = edges;
        match result {
            Ok(()) => {
                self.now = t.next();
                self.steps += 1;
                Ok(())
            }
            Err((i, err)) => Err(self.abort(i, err)),
        }
    }

    /// Step until `until` (exclusive) is reached.
    pub fn run(&mut self, until: SimTime) -> Result<RunReport, RunAborted> {
        while self.now < until {
            self.step_once()?;
        }
        Ok(self.report())
    }

    /// Send `stop` to every simulator; returns the failures.
    pub fn stop(&mut self) -> Vec<(String, SimError)> {
        let mut failed = Vec::new();
        for slot in &mut self.slots {
            if let Err(e) = slot.sim.stop() {
                failed.push((slot.name.clone(), e));
            }
        }
        failed
    }

    pub fn sim_mut<T: 'static>(&mut self, name: &str) -> Option<&mut T> {
        let idx = *self.index.get(name)?;
        self.slots[idx].sim.as_any_mut().downcast_mut::<T>()
    }

    pub fn stats(&self, name: &str) -> Option<&SimStats> {
        self.index.get(name).map(|&i| &self.slots[i].stats)
    }
}
