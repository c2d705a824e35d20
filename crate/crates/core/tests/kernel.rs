use std::any::Any;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use gridloop_core::kernel::{
    DataRequest, EntityInfo, FrameDecoder, Inputs, KernelError, ModelMeta, MsgKind, Outputs, RemoteSimulator,
    SimError, SimMeta, Simulator, WireMessage, World,
};
use gridloop_core::SimTime;
use serde_json::{json, Map, Value};

type Log = Arc<Mutex<Vec<String>>>;

/// Emits a fixed value on `out` and records what it sees on `in`.
struct Probe {
    name: String,
    constant: Value,
    seen: Arc<Mutex<Vec<(u64, Inputs)>>>,
    log: Log,
    fail_at: Option<u64>,
    t: u64,
}

impl Probe {
    fn boxed(name: &str, constant: Value, log: &Log) -> (Box<Probe>, Arc<Mutex<Vec<(u64, Inputs)>>>) {
        let seen = Arc::new(Mutex::new(Vec::new()));
        let p = Probe { name: name.into(), constant, seen: seen.clone(), log: log.clone(), fail_at: None, t: 0 };
        (Box::new(p), seen)
    }
}

impl Simulator for Probe {
    fn init(&mut self, _sid: &str, _params: &Map<String, Value>) -> Result<SimMeta, SimError> {
        let mut meta = SimMeta::default();
        meta.models.insert("Node".into(), ModelMeta::new(&[], &["rx"], &["tx"]));
        Ok(meta)
    }

    fn create(&mut self, num: usize, model: &str, _params: &Map<String, Value>) -> Result<Vec<EntityInfo>, SimError> {
        Ok((0..num).map(|i| EntityInfo { eid: format!("{}/e{i}", self.name), model: model.into() }).collect())
    }

    fn step(&mut self, t: SimTime, inputs: &Inputs) -> Result<(), SimError> {
        self.t = t.as_millis();
        if self.fail_at == Some(self.t) {
            return Err(SimError::Failed("injected failure".into()));
        }
        self.log.lock().unwrap().push(format!("{}:step", self.name));
        self.seen.lock().unwrap().push((t.as_millis(), inputs.clone()));
        Ok(())
    }

    fn get_data(&mut self, request: &DataRequest) -> Result<Outputs, SimError> {
        self.log.lock().unwrap().push(format!("{}:get_data", self.name));
        let mut out = Outputs::new();
        for (eid, attrs) in request {
            for a in attrs {
                let v = if self.constant == json!("time") { json!(self.t) } else { self.constant.clone() };
                out.entry(eid.clone()).or_default().insert(a.clone(), v);
            }
        }
        Ok(out)
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

fn value_at(seen: &[(u64, Inputs)], t: u64, eid: &str) -> Value {
    let (_, inputs) = seen.iter().find(|(st, _)| *st == t).unwrap();
    inputs[eid]["rx"].values().next().unwrap().clone()
}

#[test]
fn empty_world_counts_steps() {
    let mut w = World::new();
    let r = w.run(SimTime(10)).unwrap();
    assert_eq!((r.steps, r.exchanges), (10, 0));
}

#[test]
fn time_shifted_edge_delivers_previous_step() {
    let log = Log::default();
    let mut w = World::new();
    let (a, _) = Probe::boxed("a", json!("time"), &log);
    let (b, seen_b) = Probe::boxed("b", json!("x"), &log);
    w.register("a", a, &Map::new()).unwrap();
    w.register("b", b, &Map::new()).unwrap();
    let ea = w.create("a", 1, "Node", &Map::new()).unwrap().remove(0);
    let eb = w.create("b", 1, "Node", &Map::new()).unwrap().remove(0);
    w.connect(&eb, &ea, ("tx", "rx"), false, None).unwrap();
    w.connect(&ea, &eb, ("tx", "rx"), true, Some(Value::Null)).unwrap();
    w.run(SimTime(20)).unwrap();
    let seen = seen_b.lock().unwrap();
    assert_eq!(value_at(&seen, 0, "b/e0"), Value::Null);
    for t in 1..20 {
        assert_eq!(value_at(&seen, t, "b/e0"), json!(t - 1), "step {t}");
    }
}

#[test]
fn constant_output_through_shifted_loop() {
    let log = Log::default();
    let mut w = World::new();
    let (a, seen_a) = Probe::boxed("a", json!("x"), &log);
    let (b, _) = Probe::boxed("b", json!("y"), &log);
    w.register("a", a, &Map::new()).unwrap();
    w.register("b", b, &Map::new()).unwrap();
    let ea = w.create("a", 1, "Node", &Map::new()).unwrap().remove(0);
    let eb = w.create("b", 1, "Node", &Map::new()).unwrap().remove(0);
    w.connect(&ea, &eb, ("tx", "rx"), false, None).unwrap();
    w.connect(&eb, &ea, ("tx", "rx"), true, Some(json!({"tx": null}))).unwrap();
    let r = w.run(SimTime(3)).unwrap();
    assert_eq!(r.exchanges, 6);
    let seen = seen_a.lock().unwrap();
    assert_eq!(value_at(&seen, 0, "a/e0"), json!({"tx": null}));
    assert_eq!(value_at(&seen, 1, "a/e0"), json!("y"));
    assert_eq!(value_at(&seen, 2, "a/e0"), json!("y"));
    // Source order: a before b every step, each with one step and one get_data.
    assert_eq!(&log.lock().unwrap()[..4], ["a:step", "a:get_data", "b:step", "b:get_data"]);
}

#[test]
fn non_shifted_cycle_rejected() {
    let log = Log::default();
    let mut w = World::new();
    for n in ["a", "b", "c"] {
        w.register(n, Probe::boxed(n, json!(1), &log).0, &Map::new()).unwrap();
    }
    let e: Vec<_> = ["a", "b", "c"].iter().map(|n| w.create(n, 1, "Node", &Map::new()).unwrap().remove(0)).collect();
    w.connect(&e[0], &e[1], ("tx", "rx"), false, None).unwrap();
    w.connect(&e[1], &e[2], ("tx", "rx"), false, None).unwrap();
    assert!(matches!(w.connect(&e[2], &e[0], ("tx", "rx"), false, None), Err(KernelError::Cycle { .. })));
    assert!(matches!(w.connect(&e[1], &e[0], ("tx", "rx"), false, None), Err(KernelError::Cycle { .. })));
    assert!(matches!(w.connect(&e[0], &e[0], ("tx", "rx"), false, None), Err(KernelError::Cycle { .. })));
    w.connect(&e[2], &e[0], ("tx", "rx"), true, Some(Value::Null)).unwrap();
    assert_eq!(w.step_groups(), vec![vec!["a"], vec!["b"], vec!["c"]]);
}

#[test]
fn connection_validation() {
    let log = Log::default();
    let mut w = World::new();
    w.register("a", Probe::boxed("a", json!(1), &log).0, &Map::new()).unwrap();
    w.register("b", Probe::boxed("b", json!(1), &log).0, &Map::new()).unwrap();
    let ea = w.create("a", 1, "Node", &Map::new()).unwrap().remove(0);
    let eb = w.create("b", 1, "Node", &Map::new()).unwrap().remove(0);
    assert!(matches!(w.connect(&ea, &eb, ("foo", "rx"), false, None), Err(KernelError::UnknownAttribute { .. })));
    assert!(matches!(w.connect(&ea, &eb, ("rx", "rx"), false, None), Err(KernelError::UnknownAttribute { .. })));
    assert_eq!(w.connect(&ea, &eb, ("tx", "rx"), true, None), Err(KernelError::MissingInitialData));
    assert_eq!(w.connect(&ea, &eb, ("tx", "rx"), false, Some(json!(1))), Err(KernelError::UnexpectedInitialData));
    assert!(matches!(
        w.register("a", Probe::boxed("a", json!(1), &log).0, &Map::new()),
        Err(KernelError::DuplicateSimulator(_))
    ));
    assert!(matches!(w.create("a", 1, "Nope", &Map::new()), Err(KernelError::UnknownModel { .. })));
}

#[test]
fn every_simulator_polled_once_per_step() {
    let log = Log::default();
    let mut w = World::new();
    for n in ["vif-sim-0", "vif-sim-1", "net"] {
        w.register(n, Probe::boxed(n, json!([]), &log).0, &Map::new()).unwrap();
    }
    let v0 = w.create("vif-sim-0", 1, "Node", &Map::new()).unwrap().remove(0);
    let v1 = w.create("vif-sim-1", 1, "Node", &Map::new()).unwrap().remove(0);
    let net = w.create("net", 2, "Node", &Map::new()).unwrap();
    w.connect(&v0, &net[0], ("tx", "rx"), false, None).unwrap();
    w.connect(&v1, &net[1], ("tx", "rx"), false, None).unwrap();
    w.connect(&net[0], &v0, ("tx", "rx"), true, Some(Value::Null)).unwrap();
    w.connect(&net[1], &v1, ("tx", "rx"), true, Some(Value::Null)).unwrap();
    let r = w.run(SimTime(50)).unwrap();
    for n in ["vif-sim-0", "vif-sim-1", "net"] {
        assert_eq!((r.sims[n].steps, r.sims[n].polls), (50, 50), "{n}");
    }
    let log = log.lock().unwrap();
    for n in ["vif-sim-0", "vif-sim-1"] {
        assert_eq!(log.iter().filter(|l| **l == format!("{n}:get_data")).count(), 50);
    }
}

#[test]
fn failing_simulator_aborts_with_partial_report() {
    let log = Log::default();
    let mut w = World::new();
    let (mut bad, _) = Probe::boxed("bad", json!(1), &log);
    bad.fail_at = Some(7);
    w.register("ok", Probe::boxed("ok", json!(1), &log).0, &Map::new()).unwrap();
    w.register("bad", bad, &Map::new()).unwrap();
    let err = w.run(SimTime(100)).unwrap_err();
    assert_eq!(err.simulator, "bad");
    assert_eq!(err.report.steps, 7);
    assert!(err.to_string().contains("bad"));
}

/// A scripted out-of-process simulator speaking the framed protocol.
fn fake_remote(listener: TcpListener, methods: Arc<Mutex<Vec<String>>>) -> std::thread::JoinHandle<()> {
    std::thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        let mut dec = FrameDecoder::new();
        let mut buf = [0u8; 4096];
        loop {
            let msg = loop {
                if let Some(m) = dec.next_message().unwrap() {
                    break m;
                }
                let n = s.read(&mut buf).unwrap();
                if n == 0 {
                    return;
                }
                // Feed one byte at a time to exercise partial frames.
                for b in &buf[..n] {
                    dec.feed(std::slice::from_ref(b));
                }
            };
            assert_eq!(msg.kind, MsgKind::Request);
            let req = msg.as_request().unwrap();
            methods.lock().unwrap().push(req.method.clone());
            let result = match req.method.as_str() {
                "init" => json!({"api_version": "3.0", "models": {"Vif": {"public": true, "params": [], "inputs": ["rx"], "outputs": ["tx"]}}}),
                "create" => json!([{"eid": "vif-0", "type": "Vif"}]),
                "get_data" => json!({"vif-0": {"tx": ["RQAAFAAAQABAEQAACkAAAgpAAAM="]}}),
                "step" if req.args[0] == json!(2) => {
                    let reply = WireMessage::error(msg.id, "step 2 exploded").encode().unwrap();
                    s.write_all(&reply).unwrap();
                    continue;
                }
                _ => Value::Null,
            };
            s.write_all(&WireMessage::success(msg.id, result).encode().unwrap()).unwrap();
            if req.method == "stop" {
                return;
            }
        }
    })
}

#[test]
fn remote_simulator_round_trip() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let methods = Arc::new(Mutex::new(Vec::new()));
    let server = fake_remote(listener, methods.clone());
    let stream = std::net::TcpStream::connect(addr).unwrap();
    let remote = RemoteSimulator::new(stream, Duration::from_secs(5)).unwrap();

    let mut w = World::new();
    let meta = w.register("vif-sim-0", Box::new(remote), &Map::new()).unwrap().clone();
    assert_eq!(meta.models["Vif"].outputs, ["tx"]);
    let log = Log::default();
    w.register("sink", Probe::boxed("sink", json!(null), &log).0, &Map::new()).unwrap();
    let vif = w.create("vif-sim-0", 1, "Vif", &Map::new()).unwrap().remove(0);
    let sink = w.create("sink", 1, "Node", &Map::new()).unwrap().remove(0);
    w.connect(&vif, &sink, ("tx", "rx"), false, None).unwrap();

    let err = w.run(SimTime(5)).unwrap_err();
    assert_eq!(err.simulator, "vif-sim-0");
    assert_eq!(err.error, SimError::Remote("step 2 exploded".into()));
    assert_eq!(err.report.steps, 2);
    w.stop();
    server.join().unwrap();
    let m = methods.lock().unwrap().clone();
    assert_eq!(m, ["init", "create", "setup_done", "step", "get_data", "step", "get_data", "step", "stop"]);
}

#[test]
fn remote_handshake_timeout() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    // Accepts but never answers.
    let t = std::thread::spawn(move || {
        let (s, _) = listener.accept().unwrap();
        std::thread::sleep(Duration::from_millis(600));
        drop(s);
    });
    let stream = std::net::TcpStream::connect(addr).unwrap();
    let remote = RemoteSimulator::new(stream, Duration::from_millis(200)).unwrap();
    let mut w = World::new();
    let err = w.register("dead", Box::new(remote), &Map::new()).unwrap_err();
    assert!(matches!(err, KernelError::Sim { source: SimError::Timeout(_), .. }), "{err:?}");
    t.join().unwrap();
}

#[test]
fn stats_lookup() {
    let mut w = World::new();
    let log = Log::default();
    w.register("a", Probe::boxed("a", json!(1), &log).0, &Map::new()).unwrap();
    w.run(SimTime(3)).unwrap();
    assert_eq!(w.stats("a").unwrap().polls, 3);
    assert!(w.sim_mut::<Probe>("a").is_some());
}
