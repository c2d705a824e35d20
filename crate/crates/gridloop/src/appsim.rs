//! The in-process application simulator: one `App` entity per supervised
//! app process.
//!
//! Inputs: `readings` (grid bus readings), `inbound` (packets the network
//! delivered toward the app's node) and `traffic` (the app's own outbound
//! packets; only orders this simulator after the vif-sims). Outputs:
//! `setpoints`, and `sent`, true when the app may have written packets
//! this step.
//!
//! An app with a control channel is ticked when it has readings, new
//! inbound packets, queued commands or a wake-up time due, and on the very
//! first step. Apps without a channel are only watched for liveness.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use gridloop_core::kernel::{DataRequest, EntityInfo, Inputs, ModelMeta, Outputs, SimError, SimMeta, Simulator};
use gridloop_core::SimTime;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::control::{readings_from_value, Command, Reply, Tick, Values};
use crate::supervisor::{ExitReport, Proc};

pub const APP_MODEL: &str = "App";
pub const DEFAULT_REPLY_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AppEvent {
    pub t: u64,
    pub app: String,
    pub event: Value,
}

pub struct ManagedApp {
    proc: Proc,
    controlled: bool,
    grace: Duration,
    wake: Option<u64>,
    ticks: u64,
}

impl ManagedApp {
    pub fn new(proc: Proc, controlled: bool, grace: Duration) -> Self {
        ManagedApp { proc, controlled, grace, wake: None, ticks: 0 }
    }
}

pub struct AppSimulator {
    apps: BTreeMap<String, ManagedApp>,
    entities: BTreeMap<String, String>,
    commands: BTreeMap<String, Vec<Command>>,
    in_flight: Vec<String>,
    sent: BTreeSet<String>,
    setpoints: BTreeMap<String, Values>,
    events: Vec<AppEvent>,
    now: u64,
    first: bool,
    reply_timeout: Duration,
}

impl AppSimulator {
    pub fn new(apps: BTreeMap<String, ManagedApp>) -> Self {
        AppSimulator {
            apps,
            entities: BTreeMap::new(),
            commands: BTreeMap::new(),
            in_flight: Vec::new(),
            sent: BTreeSet::new(),
            setpoints: BTreeMap::new(),
            events: Vec::new(),
            now: 0,
            first: true,
            reply_timeout: DEFAULT_REPLY_TIMEOUT,
        }
    }

    pub fn set_reply_timeout(&mut self, t: Duration) {
        self.reply_timeout = t;
    }

    /// Queue a command for the app's next tick.
    pub fn command(&mut self, app: &str, cmd: Command) {
        self.commands.entry(app.to_string()).or_default().push(cmd);
    }

    pub fn events(&self) -> &[AppEvent] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<AppEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn ticks(&self, app: &str) -> Option<u64> {
        self.apps.get(app).map(|a| a.ticks)
    }

    pub fn pids(&self) -> BTreeMap<String, u32> {
        self.apps.iter().map(|(n, a)| (n.clone(), a.proc.pid())).collect()
    }

    /// Stop every app (SIGTERM, then SIGKILL after its grace).
    pub fn stop_all(&mut self) -> Vec<ExitReport> {
        self.apps.values_mut().map(|a| a.proc.stop(a.grace)).collect()
    }

    pub fn any_group_alive(&self) -> Vec<String> {
        self.apps.values().filter(|a| a.proc.group_alive()).map(|a| a.proc.name().to_string()).collect()
    }

    fn app_of(&self, eid: &str) -> Result<&str, SimError> {
        self.entities.get(eid).map(String::as_str).ok_or_else(|| SimError::Failed(format!("unknown entity {eid}")))
    }
}

fn has_packets(v: &Value) -> bool {
    matches!(v, Value::Array(a) if !a.is_empty())
}

impl Simulator for AppSimulator {
    fn init(&mut self, _sid: &str, _params: &Map<String, Value>) -> Result<SimMeta, SimError> {
        let mut meta = SimMeta::default();
        meta.models.insert(APP_MODEL.into(), ModelMeta::new(&["name"], &["readings", "inbound", "traffic"], &["setpoints", "sent"]));
        Ok(meta)
    }

    fn create(&mut self, num: usize, model: &str, params: &Map<String, Value>) -> Result<Vec<EntityInfo>, SimError> {
        if model != APP_MODEL || num != 1 {
            return Err(SimError::Failed(format!("create {num} x {model:?}: expected one {APP_MODEL}")));
        }
        let name = params
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| SimError::Failed("missing string parameter \"name\"".into()))?;
        if !self.apps.contains_key(name) {
            return Err(SimError::Failed(format!("no process for app {name}")));
        }
        if self.entities.insert(name.to_string(), name.to_string()).is_some() {
            return Err(SimError::Failed(format!("entity {name} already exists")));
        }
        Ok(vec![EntityInfo { eid: name.to_string(), model: APP_MODEL.into() }])
    }

    fn step(&mut self, t: SimTime, inputs: &Inputs) -> Result<(), SimError> {
        self.start_step(t, inputs)?;
        self.finish_step()
    }

    fn start_step(&mut self, t: SimTime, inputs: &Inputs) -> Result<(), SimError> {
        self.now = t.as_millis();
        self.setpoints.clear();
        self.sent.clear();
        let mut readings: BTreeMap<String, Values> = BTreeMap::new();
        let mut traffic: BTreeSet<String> = BTreeSet::new();
        let mut bound: BTreeSet<String> = BTreeSet::new();
        for (eid, attrs) in inputs {
            let app = self.app_of(eid)?.to_string();
            if let Some(srcs) = attrs.get("readings") {
                bound.insert(app.clone());
                for v in srcs.values() {
                    readings.entry(app.clone()).or_default().extend(readings_from_value(v));
                }
            }
            if attrs.get("inbound").into_iter().flat_map(|m| m.values()).any(has_packets) {
                traffic.insert(app);
            }
        }

        let mut due = Vec::new();
        for (name, app) in &mut self.apps {
            if !app.proc.alive() {
                return Err(SimError::Failed(format!("app {name} is not running")));
            }
            if !app.controlled {
                self.sent.insert(name.clone());
                continue;
            }
            let wants = self.first
                || bound.contains(name)
                || traffic.contains(name)
                || self.commands.get(name).is_some_and(|c| !c.is_empty())
                || app.wake.is_some_and(|w| w <= self.now);
            if wants {
                let tick = Tick {
                    t: self.now,
                    readings: readings.remove(name).unwrap_or_default(),
                    commands: self.commands.remove(name).unwrap_or_default(),
                };
                let line = serde_json::to_string(&tick).expect("plain data");
                app.proc.send_line(&line).map_err(|e| SimError::Failed(format!("app {name}: {e}")))?;
                app.ticks += 1;
                self.sent.insert(name.clone());
                due.push(name.clone());
            }
        }
        self.first = false;
        self.in_flight = due;
        Ok(())
    }

    fn finish_step(&mut self) -> Result<(), SimError> {
        for name in std::mem::take(&mut self.in_flight) {
            let app = self.apps.get_mut(&name).expect("ticked app exists");
            let line = app.proc.read_line(self.reply_timeout).map_err(|e| SimError::Failed(format!("app {name}: {e}")))?;
            let reply: Reply = serde_json::from_str(&line)
                .map_err(|e| SimError::Protocol(format!("app {name} answered {line:?}: {e}")))?;
            app.wake = reply.wake;
            if !reply.setpoints.is_empty() {
                self.setpoints.insert(name.clone(), reply.setpoints);
            }
            for event in reply.events {
                self.events.push(AppEvent { t: self.now, app: name.clone(), event });
            }
        }
        Ok(())
    }

    fn get_data(&mut self, request: &DataRequest) -> Result<Outputs, SimError> {
        let mut out = Outputs::new();
        for (eid, attrs) in request {
            let app = self.app_of(eid)?.to_string();
            for attr in attrs {
                let v = match attr.as_str() {
                    "setpoints" => match self.setpoints.get(&app) {
                        Some(sp) => json!(sp),
                        None => continue,
                    },
                    "sent" => json!(self.sent.contains(&app)),
                    _ => return Err(SimError::Failed(format!("{eid} has no output {attr:?}"))),
                };
                out.entry(eid.clone()).or_default().insert(attr.clone(), v);
            }
        }
        Ok(out)
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
