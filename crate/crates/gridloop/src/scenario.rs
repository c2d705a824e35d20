//! Scenario files: one TOML document describing the network, the apps, the
//! grid and the measurements of a run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use gridloop_core::grid::{Grid, GridSpec};
use gridloop_core::netsim::{AreaSettings, HostSpec, LinkSpec, NodeRole, SubnetSpec, Topology, TopologySpec};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BUFFER_LIMIT: usize = 1 << 20;
pub const DEFAULT_GRACE_MS: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    /// Mandatory: every random draw of a run derives from it.
    pub seed: Option<u64>,
    #[serde(default = "default_duration")]
    pub duration_ms: u64,
    #[serde(default)]
    pub mode: VifSimMode,
    #[serde(default)]
    pub areas: AreaSettings,
    #[serde(default)]
    pub subnets: Vec<SubnetSpec>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub apps: Vec<AppSpec>,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub measurements: Vec<MeasurementSpec>,
}

fn default_duration() -> u64 {
    1000
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VifSimMode {
    #[default]
    PerContainer,
    Mux,
}

impl VifSimMode {
    pub fn as_str(self) -> &'static str {
        match self {
            VifSimMode::PerContainer => "per-container",
            VifSimMode::Mux => "mux",
        }
    }
}

/// Bundled test app behaviours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    /// Pings and bulk-sends to its peer on command.
    Client,
    /// Answers echo requests and acknowledges bulk data.
    Server,
    /// Turns voltage readings into power setpoints.
    Droop,
    /// Like `server`, but ignores the polite termination signal.
    Stubborn,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Client => "client",
            Role::Server => "server",
            Role::Droop => "droop",
            Role::Stubborn => "stubborn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppSpec {
    pub name: String,
    /// Gateway host the app's traffic enters the network at. Apps without
    /// a node have no vif.
    #[serde(default)]
    pub node: Option<String>,
    #[serde(default)]
    pub role: Option<Role>,
    #[serde(default)]
    pub command: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    /// Target app for a client.
    #[serde(default)]
    pub peer: Option<String>,
    /// Clients only: ping the peer on their own every this many ms.
    #[serde(default)]
    pub ping_every_ms: Option<u64>,
    /// Clients only: echo requests sent at start-up, before the first tick.
    #[serde(default)]
    pub prestart_pings: u32,
    #[serde(default)]
    pub grid_bus: Option<String>,
    #[serde(default = "default_grace")]
    pub shutdown_grace_ms: u64,
    #[serde(default = "default_buffer_limit")]
    pub buffer_limit: usize,
}

fn default_grace() -> u64 {
    DEFAULT_GRACE_MS
}

fn default_buffer_limit() -> usize {
    DEFAULT_BUFFER_LIMIT
}

impl AppSpec {
    pub fn bundled(name: &str, node: &str, role: Role) -> Self {
        AppSpec {
            name: name.into(),
            node: Some(node.into()),
            role: Some(role),
            command: Vec::new(),
            env: BTreeMap::new(),
            peer: None,
            ping_every_ms: None,
            prestart_pings: 0,
            grid_bus: None,
            shutdown_grace_ms: DEFAULT_GRACE_MS,
            buffer_limit: DEFAULT_BUFFER_LIMIT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    Rtt,
    BulkThroughput,
}

impl MeasurementKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MeasurementKind::Rtt => "rtt",
            MeasurementKind::BulkThroughput => "bulk_throughput",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            MeasurementKind::Rtt => "ms",
            MeasurementKind::BulkThroughput => "kB/s",
        }
    }
}

impl fmt::Display for MeasurementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementSpec {
    pub kind: MeasurementKind,
    pub repeats: u32,
    /// Client/server app name pairs declared under `apps`.
    #[serde(default)]
    pub pairs: Vec<(String, String)>,
    /// Generated layout instead of declared pairs: for each count, that
    /// many client/server pairs are placed in `client_subnet` and
    /// `server_subnet`.
    #[serde(default)]
    pub node_counts: Vec<u32>,
    #[serde(default)]
    pub client_subnet: Option<String>,
    #[serde(default)]
    pub server_subnet: Option<String>,
    /// Echo requests per client and repeat.
    #[serde(default = "one")]
    pub pings_per_repeat: u32,
    #[serde(default = "default_bulk_bytes")]
    pub bytes_total: u64,
    /// Bulk window in segments.
    #[serde(default = "default_window")]
    pub window: u32,
    /// A ping without reply after this long is lost; a transfer without
    /// progress for this long has failed.
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    /// Bulk retransmission timeout.
    #[serde(default = "default_rto")]
    pub rto_ms: u64,
}

fn one() -> u32 {
    1
}

fn default_bulk_bytes() -> u64 {
    64 * 1400
}

fn default_window() -> u32 {
    32
}

fn default_timeout() -> u64 {
    10_000
}

fn default_rto() -> u64 {
    500
}

impl MeasurementSpec {
    pub fn generated(&self) -> bool {
        !self.node_counts.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
}

impl ScenarioSpec {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Read { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or_default()
    }

    pub fn topology_spec(&self) -> TopologySpec {
        TopologySpec {
            seed: self.seed(),
            areas: self.areas.clone(),
            subnets: self.subnets.clone(),
            links: self.links.clone(),
        }
    }

    /// The grid bus each app is bound to.
    pub fn bindings(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for app in &self.apps {
            if let Some(bus) = &app.grid_bus {
                out.insert(app.name.clone(), bus.clone());
            }
        }
        if let Some(grid) = &self.grid {
            for bus in &grid.buses {
                for app in &bus.attached_apps {
                    out.entry(app.clone()).or_insert_with(|| bus.id.clone());
                }
            }
        }
        out
    }

    /// A copy of this scenario with `pairs` generated client/server apps
    /// and no measurements.
    pub fn with_generated_pairs(&self, m: &MeasurementSpec, pairs: u32) -> ScenarioSpec {
        let mut s = self.clone();
        let (cs, ss) = (m.client_subnet.clone().unwrap_or_default(), m.server_subnet.clone().unwrap_or_default());
        for i in 0..pairs {
            let (c, v) = (format!("c{i}"), format!("s{i}"));
            if let Some(sub) = s.subnets.iter_mut().find(|x| x.name == cs) {
                sub.hosts.push(HostSpec::Name(c.clone()));
            }
            if let Some(sub) = s.subnets.iter_mut().find(|x| x.name == ss) {
                sub.hosts.push(HostSpec::Name(v.clone()));
            }
            let mut client = AppSpec::bundled(&format!("client-{i}"), &c, Role::Client);
            client.peer = Some(format!("server-{i}"));
            s.apps.push(client);
            s.apps.push(AppSpec::bundled(&format!("server-{i}"), &v, Role::Server));
        }
        s.measurements.clear();
        s
    }

    /// Every problem at once; empty when the scenario is usable.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.seed.is_none() {
            errs.push("seed is missing; every scenario must fix its seed".to_string());
        }
        if self.duration_ms == 0 {
            errs.push("duration_ms must be at least 1".into());
        }
        if let Err(e) = self.areas.validate() {
            errs.push(format!("areas: {e}"));
        }

        let topo = if self.subnets.is_empty() {
            if self.apps.iter().any(|a| a.node.is_some()) {
                errs.push("apps are attached to nodes but no subnets are declared".into());
            }
            None
        } else {
            match Topology::build(&self.topology_spec()) {
                Ok(t) => Some(t),
                Err(e) => {
                    errs.push(format!("network: {e}"));
                    None
                }
            }
        };

        let mut names = BTreeSet::new();
        let mut nodes_used: BTreeMap<&str, &str> = BTreeMap::new();
        for app in &self.apps {
            let n = &app.name;
            if n.is_empty() || n.contains(['/', '.', ' ']) {
                errs.push(format!("app name {n:?} must be non-empty without '/', '.' or spaces"));
            }
            if !names.insert(n.as_str()) {
                errs.push(format!("app {n:?} declared twice"));
            }
            match (&app.role, app.command.is_empty()) {
                (Some(_), false) => errs.push(format!("app {n}: give either role or command, not both")),
                (None, true) => errs.push(format!("app {n}: launch command is empty and no role is set")),
                (None, false) if app.command[0].is_empty() => errs.push(format!("app {n}: empty executable")),
                _ => {}
            }
            if app.shutdown_grace_ms == 0 {
                errs.push(format!("app {n}: shutdown_grace_ms must be positive"));
            }
            if let Some(node) = &app.node {
                if let Some(prev) = nodes_used.insert(node, n) {
                    errs.push(format!("apps {prev} and {n} share node {node}"));
                }
                if let Some(t) = &topo {
                    match t.node_by_name(node) {
                        None => errs.push(format!("app {n}: unknown node {node:?}")),
                        Some(id) if t.node(id).role != NodeRole::AppGateway => {
                            errs.push(format!("app {n}: node {node} is not an app gateway"))
                        }
                        _ => {}
                    }
                }
            } else if matches!(app.role, Some(Role::Client | Role::Server | Role::Stubborn)) {
                errs.push(format!("app {n}: a networked role needs a node"));
            }
            if app.ping_every_ms.is_some() && app.role != Some(Role::Client) {
                errs.push(format!("app {n}: ping_every_ms only applies to clients"));
            }
            if app.prestart_pings > 0 && app.role != Some(Role::Client) {
                errs.push(format!("app {n}: prestart_pings only applies to clients"));
            }
            if app.ping_every_ms == Some(0) {
                errs.push(format!("app {n}: ping_every_ms must be positive"));
            }
            if app.role == Some(Role::Client) && app.peer.is_none() {
                errs.push(format!("app {n}: a client needs a peer"));
            }
        }
        for app in &self.apps {
            if let Some(peer) = &app.peer {
                match self.apps.iter().find(|a| &a.name == peer) {
                    None => errs.push(format!("app {}: unknown peer {peer:?}", app.name)),
                    Some(p) if p.node.is_none() => errs.push(format!("app {}: peer {peer} has no node", app.name)),
                    Some(p) if p.name == app.name => errs.push(format!("app {}: peer is itself", app.name)),
                    _ => {}
                }
            }
        }

        match &self.grid {
            Some(g) => {
                if let Err(e) = Grid::build(g) {
                    errs.push(format!("grid: {e}"));
                }
                let buses: BTreeSet<&str> = g.buses.iter().map(|b| b.id.as_str()).collect();
                let mut attached: BTreeMap<&str, &str> = BTreeMap::new();
                for b in &g.buses {
                    for a in &b.attached_apps {
                        if !names.contains(a.as_str()) {
                            errs.push(format!("bus {}: unknown attached app {a:?}", b.id));
                        }
                        if let Some(prev) = attached.insert(a, &b.id) {
                            errs.push(format!("app {a} attached to both {prev} and {}", b.id));
                        }
                    }
                }
                for app in &self.apps {
                    if let Some(bus) = &app.grid_bus {
                        if !buses.contains(bus.as_str()) {
                            errs.push(format!("app {}: unknown grid bus {bus:?}", app.name));
                        }
                        if let Some(other) = attached.get(app.name.as_str()) {
                            if *other != bus {
                                errs.push(format!("app {}: grid_bus {bus} but attached to {other}", app.name));
                            }
                        }
                    }
                }
            }
            None => {
                for app in self.apps.iter().filter(|a| a.grid_bus.is_some()) {
                    errs.push(format!("app {}: grid_bus given but there is no grid", app.name));
                }
            }
        }

        for (i, m) in self.measurements.iter().enumerate() {
            let at = format!("measurement {} ({})", i + 1, m.kind);
            if m.repeats == 0 {
                errs.push(format!("{at}: repeats must be at least 1"));
            }
            if m.timeout_ms == 0 {
                errs.push(format!("{at}: timeout_ms must be positive"));
            }
            if m.kind == MeasurementKind::Rtt {
                if !(1..=1000).contains(&m.pings_per_repeat) {
                    errs.push(format!("{at}: pings_per_repeat must be in 1..=1000"));
                }
                if u64::from(m.pings_per_repeat) * u64::from(m.repeats) > 65_536 {
                    errs.push(format!("{at}: more than 65536 pings would reuse echo sequence numbers"));
                }
            }
            if m.kind == MeasurementKind::BulkThroughput {
                if m.bytes_total == 0 {
                    errs.push(format!("{at}: bytes_total must be positive"));
                }
                if m.bytes_total > u64::from(u32::MAX) {
                    errs.push(format!("{at}: bytes_total too large"));
                }
                if m.window == 0 {
                    errs.push(format!("{at}: window must be at least 1"));
                }
                if m.rto_ms == 0 {
                    errs.push(format!("{at}: rto_ms must be positive"));
                }
            }
            match (m.pairs.is_empty(), m.node_counts.is_empty()) {
                (true, true) => errs.push(format!("{at}: needs pairs or node_counts")),
                (false, false) => errs.push(format!("{at}: give pairs or node_counts, not both")),
                (false, true) => {
                    for (c, s) in &m.pairs {
                        for (who, want) in [(c, Role::Client), (s, Role::Server)] {
                            match self.apps.iter().find(|a| &a.name == who) {
                                None => errs.push(format!("{at}: unknown app {who:?}")),
                                Some(a) if a.role != Some(want) && !(want == Role::Server && a.role == Some(Role::Stubborn)) => {
                                    errs.push(format!("{at}: {who} must have role {}", want.as_str()))
                                }
                                _ => {}
                            }
                        }
                        if let Some(a) = self.apps.iter().find(|a| &a.name == c) {
                            if a.peer.as_ref() != Some(s) {
                                errs.push(format!("{at}: client {c} does not target {s}"));
                            }
                        }
                    }
                }
                (true, false) => {
                    if m.node_counts.contains(&0) {
                        errs.push(format!("{at}: node counts must be positive"));
                    }
                    if m.node_counts.iter().any(|&n| n > 120) {
                        errs.push(format!("{at}: at most 120 generated pairs"));
                    }
                    for (what, sub) in [("client_subnet", &m.client_subnet), ("server_subnet", &m.server_subnet)] {
                        match sub {
                            None => errs.push(format!("{at}: {what} is required with node_counts")),
                            Some(s) if !self.subnets.iter().any(|x| &x.name == s) => {
                                errs.push(format!("{at}: {what} {s:?} is not declared"))
                            }
                            _ => {}
                        }
                    }
                    if m.client_subnet.is_some() && m.client_subnet == m.server_subnet {
                        errs.push(format!("{at}: clients and servers need separate subnets"));
                    }
                    if let (Some(max), true) = (m.node_counts.iter().max(), errs.is_empty()) {
                        let generated = self.with_generated_pairs(m, *max);
                        if let Err(e) = Topology::build(&generated.topology_spec()) {
                            errs.push(format!("{at}: generated layout for {max} pairs: {e}"));
                        }
                    }
                }
            }
        }
        errs
    }

    pub fn check(&self) -> Result<(), ScenarioError> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(errs))
        }
    }
}
