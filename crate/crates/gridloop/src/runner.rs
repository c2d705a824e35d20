//! Assembles and drives one co-simulation world: vifs, apps, vif-sims, the
//! network simulator, the app simulator and the grid stub.
//!
//! Dataflow per app with a node:
//!
//! ```text
//! vif-sim.tx --> ict.rx            (same step)
//! ict.tx     --> vif-sim.rx        (next step)
//! ict.tx     --> apps.inbound      (next step)
//! vif-sim.tx --> apps.traffic      (same step; orders apps after vif-sims)
//! apps.sent  --> vif-sim.sync      (next step)
//! grid.reading --> apps.readings   (next step)
//! apps.setpoints --> grid.setpoint (same step)
//! ```

use std::collections::BTreeMap;
use std::net::{Ipv4Addr, SocketAddr, TcpListener, UdpSocket};
use std::path::{Path, PathBuf};
use std::thread::sleep;
use std::time::{Duration, Instant};

use gridloop_core::grid::{Grid, GridSimulator, BUS_MODEL};
use gridloop_core::kernel::{EntityRef, KernelError, RemoteSimulator, RunAborted, RunReport, World, DEFAULT_RPC_TIMEOUT};
use gridloop_core::netsim::{IctSimulator, NetworkSim, Topology, NETWORK_NODE_MODEL};
use gridloop_core::SimTime;
use log::info;
use serde::Serialize;
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::appsim::{AppSimulator, ManagedApp, APP_MODEL};
use crate::instrument::DatagramCheck;
use crate::scenario::{AppSpec, ScenarioError, ScenarioSpec, VifSimMode};
use crate::supervisor::{ExitReport, Launch, Proc, SuperviseError};

pub const VIF_BIN: &str = "vif";
pub const VIFSIM_BIN: &str = "vif-sim";
pub const TESTAPP_BIN: &str = "gridloop-testapp";
pub const ICT: &str = "ict";
pub const APPS: &str = "apps";
pub const GRID: &str = "grid";
const VIF_GRACE: Duration = Duration::from_secs(2);

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Process(#[from] SuperviseError),
    #[error("kernel setup: {0}")]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Aborted(#[from] RunAborted),
    #[error("{0}")]
    Setup(String),
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Directory holding the vif, vif-sim and test app executables.
    pub bin_dir: PathBuf,
    /// Overrides the scenario's vif-sim mode.
    pub mode: Option<VifSimMode>,
    pub real_tun: bool,
    /// Wall time between starting the apps and starting the vif-sims.
    pub vifsim_delay: Duration,
    pub rpc_timeout: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            bin_dir: default_bin_dir(),
            mode: None,
            real_tun: false,
            vifsim_delay: Duration::ZERO,
            rpc_timeout: DEFAULT_RPC_TIMEOUT,
        }
    }
}

/// The directory of the running executable, or its parent for test
/// binaries under `deps/`.
pub fn default_bin_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap_or_default();
    let dir = exe.parent().map(Path::to_path_buf).unwrap_or_default();
    if dir.file_name().is_some_and(|n| n == "deps") {
        dir.parent().map(Path::to_path_buf).unwrap_or(dir)
    } else {
        dir
    }
}

/// Hands out distinct loopback ports; each stays reserved until the pool
/// is dropped.
#[derive(Default)]
struct PortPool(Vec<UdpSocket>);

impl PortPool {
    fn take(&mut self) -> Result<SocketAddr, RunError> {
        let s = UdpSocket::bind("127.0.0.1:0").map_err(|e| RunError::Setup(format!("no free port: {e}")))?;
        let a = s.local_addr().map_err(|e| RunError::Setup(e.to_string()))?;
        self.0.push(s);
        Ok(a)
    }
}

/// Wait until every address in `addrs` is taken, which is how a freshly
/// started vif shows it is ready.
fn wait_bound(addrs: &[SocketAddr], p: &mut Proc, limit: Duration) -> Result<(), RunError> {
    let end = Instant::now() + limit;
    for a in addrs {
        while UdpSocket::bind(a).is_ok() {
            if !p.alive() {
                return Err(RunError::Setup(format!("{} exited during start-up", p.name())));
            }
            if Instant::now() > end {
                return Err(RunError::Setup(format!("{} did not bind {a}", p.name())));
            }
            sleep(Duration::from_millis(1));
        }
    }
    Ok(())
}

/// Endpoints of one app's packet path.
#[derive(Debug, Clone, Serialize)]
pub struct AppWiring {
    pub app: String,
    pub node: String,
    pub ip: Ipv4Addr,
    pub vif_device: SocketAddr,
    pub app_socket: SocketAddr,
    pub vif_tunnel: SocketAddr,
    pub vifsim: String,
    pub vifsim_listen: SocketAddr,
    pub vif_pid: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionReport {
    pub run: RunReport,
    pub exits: Vec<ExitReport>,
    pub orphans: Vec<String>,
    pub stop_failures: Vec<String>,
    pub vifsim_exits: Vec<ExitReport>,
    pub vif_exits: Vec<ExitReport>,
    pub wall_ms: f64,
}

impl SessionReport {
    pub fn clean(&self) -> bool {
        self.orphans.is_empty() && self.stop_failures.is_empty()
    }
}

pub struct Session {
    world: World,
    vifs: Vec<Proc>,
    vifsims: Vec<(String, Proc)>,
    wiring: Vec<AppWiring>,
    kernel: SocketAddr,
    started: Instant,
    mode: VifSimMode,
}

fn params(pairs: &[(&str, Value)]) -> Map<String, Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn app_launch(app: &AppSpec, ident: u16, opts: &RunOptions, peer_ip: Option<Ipv4Addr>) -> Launch {
    match app.role {
        Some(role) => {
            let mut l = Launch::new(opts.bin_dir.join(TESTAPP_BIN))
                .arg("--role")
                .arg(role.as_str())
                .arg("--ident")
                .arg(ident.to_string());
            if let Some(ip) = peer_ip {
                l = l.arg("--peer-ip").arg(ip.to_string());
            }
            if let Some(every) = app.ping_every_ms {
                l = l.arg("--ping-every-ms").arg(every.to_string());
            }
            if app.prestart_pings > 0 {
                l = l.arg("--prestart-pings").arg(app.prestart_pings.to_string());
            }
            l.control = true;
            l
        }
        None => {
            let mut l = Launch::new(&app.command[0]);
            l.args = app.command[1..].to_vec();
            l.control = app.grid_bus.is_some();
            l
        }
    }
}

impl Session {
    pub fn start(spec: &ScenarioSpec, opts: &RunOptions) -> Result<Session, RunError> {
        spec.check()?;
        let started = Instant::now();
        let mode = opts.mode.unwrap_or(spec.mode);
        let networked: Vec<&AppSpec> = spec.apps.iter().filter(|a| a.node.is_some()).collect();
        if opts.real_tun && networked.iter().any(|a| a.role.is_some()) {
            return Err(RunError::Setup("--real-tun needs apps that use the host network stack, not bundled test apps".into()));
        }
        let topo = if spec.subnets.is_empty() { None } else { Some(Topology::build(&spec.topology_spec()).map_err(|e| RunError::Setup(e.to_string()))?) };
        let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| RunError::Setup(format!("kernel socket: {e}")))?;
        let kernel = listener.local_addr().map_err(|e| RunError::Setup(e.to_string()))?;

        let mut ports = PortPool::default();
        let mux_listen = ports.take()?;
        let mut wiring = Vec::new();
        for (i, app) in networked.iter().enumerate() {
            let node = app.node.clone().expect("networked");
            let topo = topo.as_ref().expect("validated: apps with nodes need subnets");
            let ip = topo.node(topo.node_by_name(&node).expect("validated node")).ip;
            let (vifsim, vifsim_listen) = match mode {
                VifSimMode::Mux => ("vifsim".to_string(), mux_listen),
                VifSimMode::PerContainer => (format!("vifsim-{i}"), ports.take()?),
            };
            wiring.push(AppWiring {
                app: app.name.clone(),
                node,
                ip,
                vif_device: ports.take()?,
                app_socket: ports.take()?,
                vif_tunnel: ports.take()?,
                vifsim,
                vifsim_listen,
                vif_pid: 0,
            });
        }

        drop(ports);
        let mut vifs = Vec::new();
        for (w, app) in wiring.iter_mut().zip(&networked) {
            let mut l = Launch::new(opts.bin_dir.join(VIF_BIN))
                .arg("--peer")
                .arg(w.vifsim_listen.to_string())
                .arg("--buffer-limit")
                .arg(app.buffer_limit.to_string())
                .arg("--bind")
                .arg(w.vif_tunnel.to_string());
            if opts.real_tun {
                let topo = topo.as_ref().expect("networked");
                let subnet = topo.node(topo.node_by_name(&w.node).expect("validated")).subnet;
                l = l
                    .arg("--transport")
                    .arg("tun")
                    .arg("--tun-name")
                    .arg(format!("gl{}", vifs.len()))
                    .arg("--tun-addr")
                    .arg(format!("{}/{}", w.ip, subnet.prefix_len()));
            } else {
                l = l
                    .arg("--transport")
                    .arg("loopback")
                    .arg("--device")
                    .arg(w.vif_device.to_string())
                    .arg("--app")
                    .arg(w.app_socket.to_string());
            }
            let p = Proc::spawn(&format!("vif-{}", w.app), &l)?;
            w.vif_pid = p.pid();
            vifs.push(p);
        }
        // Apps may send right away; their vif must be listening by then.
        for (w, p) in wiring.iter().zip(&mut vifs) {
            let mut addrs = vec![w.vif_tunnel];
            if !opts.real_tun {
                addrs.push(w.vif_device);
            }
            wait_bound(&addrs, p, VIF_GRACE)?;
        }

        let mut managed = BTreeMap::new();
        for (i, app) in spec.apps.iter().enumerate() {
            let peer_ip = app.peer.as_ref().and_then(|p| wiring.iter().find(|w| &w.app == p)).map(|w| w.ip);
            let mut l = app_launch(app, i as u16 + 1, opts, peer_ip);
            l.env.extend(app.env.clone());
            if let Some(w) = wiring.iter().find(|w| w.app == app.name) {
                l = l
                    .env("VIF_PEER", w.vifsim_listen.to_string())
                    .env("VIF_DEVICE", w.vif_device.to_string())
                    .env("VIF_APP", w.app_socket.to_string())
                    .env("APP_IP", w.ip.to_string());
            }
            let controlled = l.control;
            let p = Proc::spawn(&app.name, &l)?;
            managed.insert(app.name.clone(), ManagedApp::new(p, controlled, Duration::from_millis(app.shutdown_grace_ms)));
        }

        if !opts.vifsim_delay.is_zero() {
            sleep(opts.vifsim_delay);
        }

        let mut world = World::new();
        let mut vifsims: Vec<(String, Proc)> = Vec::new();
        let mut start_vifsim = |name: &str, listen: SocketAddr, world: &mut World| -> Result<(), RunError> {
            let l = Launch::new(opts.bin_dir.join(VIFSIM_BIN))
                .arg("--kernel")
                .arg(kernel.to_string())
                .arg("--listen")
                .arg(listen.to_string())
                .arg("--mode")
                .arg(mode.as_str());
            let p = Proc::spawn(name, &l)?;
            vifsims.push((name.to_string(), p));
            let mut remote = RemoteSimulator::accept(&listener, opts.rpc_timeout)
                .map_err(|e| RunError::Setup(format!("{name} did not connect: {e}")))?;
            remote.set_timeout(opts.rpc_timeout);
            world.register(name, Box::new(remote), &Map::new())?;
            Ok(())
        };
        match mode {
            VifSimMode::Mux if !wiring.is_empty() => start_vifsim("vifsim", mux_listen, &mut world)?,
            VifSimMode::Mux => {}
            VifSimMode::PerContainer => {
                for w in &wiring {
                    start_vifsim(&w.vifsim, w.vifsim_listen, &mut world)?;
                }
            }
        }

        if let Some(topo) = topo {
            let mut net = NetworkSim::new(topo, spec.seed());
            net.set_logging(true);
            world.register(ICT, Box::new(IctSimulator::new(net)), &Map::new())?;
        }
        world.register(APPS, Box::new(AppSimulator::new(managed)), &Map::new())?;
        if let Some(g) = &spec.grid {
            let grid = Grid::build(g).map_err(|e| RunError::Setup(format!("grid: {e}")))?;
            world.register(GRID, Box::new(GridSimulator::new(grid)), &Map::new())?;
            for b in &g.buses {
                world.create(GRID, 1, BUS_MODEL, &params(&[("bus", json!(b.id))]))?;
            }
        }

        let mut app_ent = BTreeMap::new();
        for app in &spec.apps {
            let e = world.create(APPS, 1, APP_MODEL, &params(&[("name", json!(app.name))]))?.remove(0);
            app_ent.insert(app.name.clone(), e);
        }
        for w in &wiring {
            let vif = world
                .create(&w.vifsim, 1, gridloop_vif::vifsim::MODEL, &params(&[("name", json!(w.app)), ("container", json!(w.vif_tunnel.to_string()))]))?
                .remove(0);
            let node = world.create(ICT, 1, NETWORK_NODE_MODEL, &params(&[("node", json!(w.node))]))?.remove(0);
            let app = &app_ent[&w.app];
            world.connect(&vif, &node, ("tx", "rx"), false, None)?;
            world.connect(&node, &vif, ("tx", "rx"), true, Some(Value::Null))?;
            world.connect(&node, app, ("tx", "inbound"), true, Some(Value::Null))?;
            world.connect(&vif, app, ("tx", "traffic"), false, None)?;
            world.connect(app, &vif, ("sent", "sync"), true, Some(Value::Bool(true)))?;
        }
        for (app, bus) in spec.bindings() {
            let b = EntityRef::new(GRID, bus);
            world.connect(&b, &app_ent[&app], ("reading", "readings"), true, Some(Value::Null))?;
            world.connect(&app_ent[&app], &b, ("setpoints", "setpoint"), false, None)?;
        }
        world.setup_done()?;
        info!("world ready after {:?}: groups {:?}", started.elapsed(), world.step_groups());
        Ok(Session { world, vifs, vifsims, wiring, kernel, started, mode })
    }

    pub fn world(&mut self) -> &mut World {
        &mut self.world
    }

    pub fn wiring(&self) -> &[AppWiring] {
        &self.wiring
    }

    pub fn mode(&self) -> VifSimMode {
        self.mode
    }

    pub fn now(&self) -> SimTime {
        self.world.now()
    }

    pub fn step(&mut self) -> Result<(), RunAborted> {
        self.world.step_once()
    }

    pub fn run_until(&mut self, t: SimTime) -> Result<(), RunAborted> {
        self.world.run(t).map(drop)
    }

    pub fn apps(&mut self) -> &mut AppSimulator {
        self.world.sim_mut::<AppSimulator>(APPS).expect("apps simulator is registered")
    }

    pub fn ict(&mut self) -> Option<&mut IctSimulator> {
        self.world.sim_mut::<IctSimulator>(ICT)
    }

    pub fn grid(&mut self) -> Option<&mut GridSimulator> {
        self.world.sim_mut::<GridSimulator>(GRID)
    }

    /// Inspect every vif and vif-sim for stream sockets on the tunnel.
    pub fn datagram_check(&mut self) -> DatagramCheck {
        let mut c = DatagramCheck::default();
        for (p, w) in self.vifs.iter().zip(&self.wiring) {
            c.vif(&w.app, p.pid());
        }
        for (name, p) in &self.vifsims {
            c.vifsim(name, p.pid(), self.kernel);
        }
        c
    }

    pub fn vif_pids(&self) -> Vec<u32> {
        self.vifs.iter().map(Proc::pid).collect()
    }

    pub fn vifsim_pids(&self) -> Vec<u32> {
        self.vifsims.iter().map(|(_, p)| p.pid()).collect()
    }

    /// Stop simulators, apps, vifs and vif-sims, then look for leftovers.
    pub fn finish(mut self) -> SessionReport {
        let run = self.world.report();
        let stop_failures: Vec<String> = self.world.stop().into_iter().map(|(s, e)| format!("{s}: {e}")).collect();
        let exits = self.apps().stop_all();
        let vif_exits: Vec<ExitReport> = self.vifs.iter_mut().map(|p| p.stop(VIF_GRACE)).collect();
        let deadline = Instant::now() + VIF_GRACE;
        while self.vifsims.iter_mut().any(|(_, p)| p.alive()) && Instant::now() < deadline {
            sleep(Duration::from_millis(5));
        }
        let vifsim_exits: Vec<ExitReport> = self.vifsims.iter_mut().map(|(_, p)| p.stop(VIF_GRACE)).collect();
        let mut orphans = self.apps().any_group_alive();
        orphans.extend(self.vifs.iter().filter(|p| p.group_alive()).map(|p| p.name().to_string()));
        orphans.extend(self.vifsims.iter().filter(|(_, p)| p.group_alive()).map(|(n, _)| n.clone()));
        orphans.extend(exits.iter().chain(&vif_exits).chain(&vifsim_exits).filter(|e| e.stragglers).map(|e| format!("{} (stragglers)", e.name)));
        SessionReport {
            run,
            exits,
            orphans,
            stop_failures,
            vifsim_exits,
            vif_exits,
            wall_ms: self.started.elapsed().as_secs_f64() * 1000.0,
        }
    }
}
