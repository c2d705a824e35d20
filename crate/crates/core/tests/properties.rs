use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use gridloop_core::addressing::{AreaKind, HostRole, PlanBlock, SubnetAllocator, SubnetPlan};
use gridloop_core::grid::{BusSpec, Grid, GridSpec};
use gridloop_core::kernel::{FrameDecoder, MsgKind, WireMessage};
use gridloop_core::packet::{icmp_echo, ipv4_udp, ipv6_udp, FrameBuffer, IcmpKind, Packet};
use proptest::prelude::*;
use serde_json::{Map, Value};

fn arb_json() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::Bool),
        any::<i64>().prop_map(Value::from),
        any::<u64>().prop_map(Value::from),
        "[ -~]{0,12}".prop_map(Value::String),
        "\\PC{0,6}".prop_map(Value::String),
    ];
    leaf.prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
            prop::collection::btree_map("[a-z]{1,5}", inner, 0..4).prop_map(|m| Value::Object(Map::from_iter(m))),
        ]
    })
}

fn arb_message() -> impl Strategy<Value = WireMessage> {
    prop_oneof![
        ("[a-z_]{1,10}", prop::collection::vec(arb_json(), 0..3), prop::collection::btree_map("[a-z]{1,4}", arb_json(), 0..3))
            .prop_flat_map(|(m, a, k)| any::<u64>().prop_map(move |id| WireMessage::request(id, &m, a.clone(), Map::from_iter(k.clone())))),
        (any::<u64>(), arb_json()).prop_map(|(id, v)| WireMessage::success(id, v)),
        (any::<u64>(), ".{0,20}").prop_map(|(id, s)| WireMessage::error(id, s)),
    ]
}

proptest! {
    #[test]
    fn wire_round_trip_any_split(msgs in prop::collection::vec(arb_message(), 1..6), cuts in prop::collection::vec(any::<prop::sample::Index>(), 0..12)) {
        let mut stream = Vec::new();
        for m in &msgs {
            let frame = m.encode().unwrap();
            let (back, used) = gridloop_core::kernel::decode_frame(&frame).unwrap().unwrap();
            prop_assert_eq!(used, frame.len());
            prop_assert_eq!(&back, m);
            stream.extend(frame);
        }
        let mut offsets: Vec<usize> = cuts.iter().map(|i| i.index(stream.len() + 1)).collect();
        offsets.push(0);
        offsets.push(stream.len());
        offsets.sort_unstable();
        let mut dec = FrameDecoder::new();
        let mut got = Vec::new();
        for w in offsets.windows(2) {
            dec.feed(&stream[w[0]..w[1]]);
            while let Some(m) = dec.next_message().unwrap() {
                got.push(m);
            }
        }
        prop_assert_eq!(got, msgs);
    }

    #[test]
    fn request_payload_shape(id in any::<u64>(), args in prop::collection::vec(arb_json(), 0..3)) {
        let m = WireMessage::request(id, "step", args.clone(), Map::new());
        prop_assert_eq!(m.kind, MsgKind::Request);
        let r = m.as_request().unwrap();
        prop_assert_eq!(r.args, args);
    }
}

fn arb_packet() -> impl Strategy<Value = Packet> {
    let v4 = |b: u8| Ipv4Addr::new(10, 64, 0, b);
    prop_oneof![
        (1u8..255, 1u8..255, 0usize..1500, any::<u16>()).prop_map(move |(a, b, n, seq)| {
            icmp_echo(v4(a), v4(b), IcmpKind::EchoRequest, 7, seq, &vec![seq as u8; n])
        }),
        (1u8..255, 1u8..255, 0usize..3000).prop_map(move |(a, b, n)| ipv4_udp(v4(a), v4(b), 1, 2, &vec![0x45; n])),
        (any::<u128>(), any::<u128>(), 0usize..2000)
            .prop_map(|(a, b, n)| ipv6_udp(a.into(), b.into(), 3, 4, &vec![0x60; n])),
    ]
}

#[derive(Debug, Clone)]
enum Split {
    Bytes,
    Whole,
    Random(Vec<prop::sample::Index>),
}

fn arb_split() -> impl Strategy<Value = Split> {
    prop_oneof![
        1 => Just(Split::Bytes),
        1 => Just(Split::Whole),
        6 => prop::collection::vec(any::<prop::sample::Index>(), 0..40).prop_map(Split::Random),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn reassembly_reproduces_packet_list(packets in prop::collection::vec(arb_packet(), 0..8), split in arb_split()) {
        let stream: Vec<u8> = packets.iter().flat_map(|p| p.bytes().to_vec()).collect();
        let mut offsets = match &split {
            Split::Bytes => (0..=stream.len()).collect::<Vec<_>>(),
            Split::Whole => vec![0, stream.len()],
            Split::Random(cuts) => {
                let mut o: Vec<usize> = cuts.iter().map(|i| i.index(stream.len() + 1)).collect();
                o.extend([0, stream.len()]);
                o
            }
        };
        offsets.sort_unstable();
        offsets.dedup();
        let mut fb = FrameBuffer::new();
        let mut got = Vec::new();
        for w in offsets.windows(2) {
            got.extend(fb.feed(&stream[w[0]..w[1]]));
        }
        prop_assert_eq!(got, packets);
        prop_assert_eq!(fb.pending(), 0);
        prop_assert_eq!(fb.desyncs(), 0);
    }

    #[test]
    fn routers_always_get_lowest_addresses(routers in 0u32..20, ops in prop::collection::vec(any::<bool>(), 0..200), index in 0u32..4096) {
        let plan = SubnetPlan::default();
        let subnet = plan.allocate_subnet(AreaKind::SharedLinks, index).unwrap();
        let mut alloc = SubnetAllocator::new(subnet).unwrap();
        for _ in 0..routers {
            alloc.allocate(HostRole::Router).unwrap();
        }
        let mut routers = routers;
        let mut hosts = Vec::new();
        for router_requested in ops {
            if router_requested {
                let r = alloc.allocate(HostRole::Router);
                if hosts.is_empty() {
                    routers += 1;
                    prop_assert_eq!(r.unwrap(), subnet.host(routers));
                } else {
                    prop_assert!(r.is_err());
                }
            } else if let Ok(h) = alloc.allocate(HostRole::Host) {
                hosts.push(h);
            }
        }
        for h in hosts {
            let offset = u32::from(h) - u32::from(subnet.base());
            prop_assert!(offset > routers && offset <= 254);
        }
    }

    #[test]
    fn grid_balance_and_monotonicity(loads in prop::collection::vec(0.0f64..500.0, 1..12), parents in prop::collection::vec(any::<prop::sample::Index>(), 12), bump in 0usize..12, extra in 0.0f64..100.0) {
        let buses: Vec<BusSpec> = loads
            .iter()
            .enumerate()
            .map(|(i, &l)| BusSpec {
                id: format!("b{i}"),
                base_load_kw: l,
                parent: (i > 0).then(|| format!("b{}", parents[i].index(i))),
                line_capacity_kw: 1000.0,
                attached_apps: vec![],
            })
            .collect();
        let mut g = Grid::build(&GridSpec { buses }).unwrap();
        let s = g.state();
        let total: f64 = loads.iter().sum();
        prop_assert!((s.flows["b0"] - total).abs() < 1e-6);
        prop_assert_eq!(&g.state(), &s);

        let bump = bump % loads.len();
        g.apply_setpoints(&BTreeMap::from([(format!("b{bump}"), extra)])).unwrap();
        let after = g.state();
        for (bus, l) in &s.loadings {
            prop_assert!(after.loadings[bus] >= *l);
        }
    }
}

#[test]
fn plan_tiles_root_exactly() {
    let plan = SubnetPlan::default();
    let blocks: Vec<_> = plan.blocks().iter().map(|(b, c)| (*b, c.to_string())).collect();
    assert_eq!(
        blocks,
        [
            (PlanBlock::Area(AreaKind::Dedicated), "10.64.0.0/12".to_string()),
            (PlanBlock::Area(AreaKind::SharedLinks), "10.80.0.0/12".to_string()),
            (PlanBlock::Area(AreaKind::HighImpairment), "10.96.0.0/12".to_string()),
            (PlanBlock::Unallocated, "10.112.0.0/12".to_string()),
        ]
    );
    // Walk every /24 of the /10: each lies in exactly one block.
    let root = plan.root();
    let mut count = [0u32; 4];
    for i in 0..(1u32 << 14) {
        let net = Ipv4Addr::from(u32::from(root.base()) + (i << 8));
        let hits: Vec<usize> = (0..4).filter(|&k| plan.blocks()[k].1.contains(net)).collect();
        assert_eq!(hits.len(), 1, "{net}");
        count[hits[0]] += 1;
        let last = Ipv4Addr::from(u32::from(net) + 255);
        assert!(plan.blocks()[hits[0]].1.contains(last));
    }
    assert_eq!(count, [4096; 4]);
}
