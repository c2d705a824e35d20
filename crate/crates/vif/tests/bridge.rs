use std::net::{Ipv4Addr, SocketAddr, TcpListener, UdpSocket};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use gridloop_core::kernel::{RemoteSimulator, Simulator};
use gridloop_core::packet::{decode_packets_b64, encode_packets_b64, ipv4_udp, Packet};
use gridloop_core::SimTime;
use gridloop_vif::{run_vif, run_vifsim, HelloBurst, Mode, TransportConfig, VifConfig, VifSimConfig, VifStats};
use serde_json::{json, Map, Value};
use tokio::sync::oneshot;

const A: Ipv4Addr = Ipv4Addr::new(10, 64, 0, 2);
const B: Ipv4Addr = Ipv4Addr::new(10, 64, 0, 3);

fn free_addr() -> SocketAddr {
    UdpSocket::bind("127.0.0.1:0").unwrap().local_addr().unwrap()
}

fn packet(n: u8, len: usize) -> Packet {
    ipv4_udp(A, B, 1000 + n as u16, 2000, &vec![n; len])
}

/// Wait until something holds `addr`.
fn wait_bound(addr: SocketAddr) {
    let end = Instant::now() + Duration::from_secs(5);
    while UdpSocket::bind(addr).is_ok() {
        assert!(Instant::now() < end, "{addr} never bound");
        thread::sleep(Duration::from_millis(2));
    }
}

struct Vif {
    stop: Option<oneshot::Sender<()>>,
    handle: Option<JoinHandle<VifStats>>,
    tunnel: SocketAddr,
    device: SocketAddr,
}

impl Vif {
    fn start(peer: SocketAddr, app: SocketAddr, hello: HelloBurst, buffer_limit: usize) -> Vif {
        let (tunnel, device) = (free_addr(), free_addr());
        let (tx, rx) = oneshot::channel();
        let cfg = VifConfig { transport: TransportConfig::Loopback { device, app }, peer, bind: tunnel, buffer_limit, hello };
        let handle = thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
            rt.block_on(run_vif(cfg, async {
                let _ = rx.await;
            }))
            .unwrap()
        });
        wait_bound(device);
        wait_bound(tunnel);
        Vif { stop: Some(tx), handle: Some(handle), tunnel, device }
    }

    fn finish(mut self) -> VifStats {
        let _ = self.stop.take().unwrap().send(());
        self.handle.take().unwrap().join().unwrap()
    }
}

fn socket() -> UdpSocket {
    let s = UdpSocket::bind("127.0.0.1:0").unwrap();
    s.set_read_timeout(Some(Duration::from_millis(50))).unwrap();
    s
}

fn recv(s: &UdpSocket, within: Duration) -> Option<(Vec<u8>, SocketAddr)> {
    let end = Instant::now() + within;
    let mut buf = vec![0u8; 65_536];
    while Instant::now() < end {
        if let Ok((n, src)) = s.recv_from(&mut buf) {
            return Some((buf[..n].to_vec(), src));
        }
    }
    None
}

fn fast_hello() -> HelloBurst {
    HelloBurst { count: 3, interval: Duration::from_millis(20), retry: Duration::from_millis(300) }
}

#[test]
fn lost_hello_burst_is_retried_until_probed() {
    let peer = socket();
    let app = socket();
    let vif = Vif::start(peer.local_addr().unwrap(), app.local_addr().unwrap(), fast_hello(), 1 << 16);

    // First burst: ignored, as if lost.
    let t0 = Instant::now();
    let mut times = Vec::new();
    while times.len() < 4 {
        let (data, _) = recv(&peer, Duration::from_secs(2)).expect("hello");
        assert!(data.is_empty());
        times.push(t0.elapsed());
    }
    assert!(times[2] - times[0] < Duration::from_millis(200), "{times:?}");
    assert!(times[3] - times[2] >= Duration::from_millis(250), "second burst came early: {times:?}");

    // Probe: the vif answers once and stops announcing.
    peer.send_to(&[], vif.tunnel).unwrap();
    let mut after = 0;
    while let Some((data, src)) = recv(&peer, Duration::from_millis(700)) {
        assert!(data.is_empty());
        assert_eq!(src, vif.tunnel);
        after += 1;
    }
    assert!(after <= 3, "hellos did not stop: {after}");
    let stats = vif.finish();
    assert_eq!(stats.probes, 1);
    assert!(stats.hellos >= 4);
}

#[test]
fn data_sent_before_the_peer_is_flushed_in_order() {
    let peer = socket();
    let app = socket();
    let vif = Vif::start(peer.local_addr().unwrap(), app.local_addr().unwrap(), fast_hello(), 1 << 16);
    let sent: Vec<Packet> = (0..5).map(|i| packet(i, 100 + i as usize)).collect();
    for p in &sent {
        app.send_to(p.bytes(), vif.device).unwrap();
    }
    thread::sleep(Duration::from_millis(100));
    while recv(&peer, Duration::from_millis(10)).is_some() {}

    peer.send_to(&[], vif.tunnel).unwrap();
    let mut got = Vec::new();
    loop {
        let (data, _) = recv(&peer, Duration::from_secs(2)).expect("flush then ack");
        if data.is_empty() {
            break;
        }
        got.push(data);
    }
    let want: Vec<Vec<u8>> = sent.iter().map(|p| p.bytes().to_vec()).collect();
    assert_eq!(got, want);
    let stats = vif.finish();
    assert_eq!((stats.buffered, stats.buffer_dropped), (5, 0));
}

#[test]
fn buffer_limit_keeps_the_newest() {
    let peer = socket();
    let app = socket();
    let sent: Vec<Packet> = (0..4).map(|i| packet(i, 472)).collect();
    // Room for two 500-byte packets.
    let vif = Vif::start(peer.local_addr().unwrap(), app.local_addr().unwrap(), fast_hello(), 1000);
    for p in &sent {
        app.send_to(p.bytes(), vif.device).unwrap();
    }
    thread::sleep(Duration::from_millis(100));
    while recv(&peer, Duration::from_millis(10)).is_some() {}
    peer.send_to(&[], vif.tunnel).unwrap();
    let mut got = Vec::new();
    loop {
        let (data, _) = recv(&peer, Duration::from_secs(2)).unwrap();
        if data.is_empty() {
            break;
        }
        got.push(data);
    }
    assert_eq!(got, vec![sent[2].bytes().to_vec(), sent[3].bytes().to_vec()]);
    assert_eq!(vif.finish().buffer_dropped, 2);
}

#[test]
fn downlink_reaches_the_app_and_strangers_are_ignored() {
    let peer = socket();
    let app = socket();
    let vif = Vif::start(peer.local_addr().unwrap(), app.local_addr().unwrap(), fast_hello(), 1 << 16);
    let stranger = socket();
    stranger.send_to(packet(9, 50).bytes(), vif.tunnel).unwrap();
    let p = packet(1, 1400);
    peer.send_to(p.bytes(), vif.tunnel).unwrap();
    let (data, src) = recv(&app, Duration::from_secs(2)).unwrap();
    assert_eq!(data, p.bytes());
    assert_eq!(src, vif.device);
    assert!(recv(&app, Duration::from_millis(200)).is_none());
    assert_eq!(vif.finish().delivered, 1);
}

fn inputs(eid: &str, attr: &str, v: Value) -> gridloop_core::kernel::Inputs {
    let mut src = std::collections::BTreeMap::new();
    src.insert("peer.x".to_string(), v);
    let mut attrs = std::collections::BTreeMap::new();
    attrs.insert(attr.to_string(), src);
    let mut out = std::collections::BTreeMap::new();
    out.insert(eid.to_string(), attrs);
    out
}

fn tx_of(sim: &mut RemoteSimulator, eid: &str) -> Vec<Packet> {
    let req = [(eid.to_string(), vec!["tx".to_string()])].into_iter().collect();
    let out = sim.get_data(&req).unwrap();
    let list: Vec<String> = serde_json::from_value(out[eid]["tx"].clone()).unwrap();
    decode_packets_b64(&list).unwrap()
}

#[test]
fn vif_and_vifsim_carry_packets_both_ways() {
    let kernel = TcpListener::bind("127.0.0.1:0").unwrap();
    let listen = free_addr();
    let cfg = VifSimConfig::new(kernel.local_addr().unwrap(), listen, Mode::PerContainer);
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let vifsim = thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(run_vifsim(cfg, async {
            let _ = stop_rx.await;
        }))
    });
    let app = socket();
    let vif = Vif::start(listen, app.local_addr().unwrap(), fast_hello(), 1 << 16);
    let early = packet(1, 300);
    app.send_to(early.bytes(), vif.device).unwrap();

    let mut sim = RemoteSimulator::accept(&kernel, Duration::from_secs(5)).unwrap();
    let meta = sim.init("vifsim", &Map::new()).unwrap();
    assert_eq!(meta.models["vif"].inputs, vec!["rx", "sync"]);
    let eid = sim.create(1, "vif", &Map::new()).unwrap().remove(0).eid;
    sim.setup_done().unwrap();

    // The first poll always probes, so the early packet is there.
    sim.step(SimTime(0), &Default::default()).unwrap();
    assert_eq!(tx_of(&mut sim, &eid), vec![early]);

    let down = ipv4_udp(B, A, 7, 8, &[0xab; 1000]);
    sim.step(SimTime(1), &inputs(&eid, "rx", json!(encode_packets_b64(std::slice::from_ref(&down))))).unwrap();
    let (data, _) = recv(&app, Duration::from_secs(2)).unwrap();
    assert_eq!(data, down.bytes());
    assert!(tx_of(&mut sim, &eid).is_empty());

    // With sync set the poll waits for what the app sent.
    let up = packet(2, 1200);
    app.send_to(up.bytes(), vif.device).unwrap();
    sim.step(SimTime(2), &inputs(&eid, "sync", json!(true))).unwrap();
    assert_eq!(tx_of(&mut sim, &eid), vec![up]);

    sim.stop().unwrap();
    let _ = stop_tx.send(());
    let stats = vifsim.join().unwrap().unwrap();
    assert_eq!((stats.packets_up, stats.packets_down, stats.desyncs), (2, 1, 0));
    let v = vif.finish();
    assert_eq!((v.forwarded, v.delivered), (2, 1));
}
