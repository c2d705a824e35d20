mod common;

use gridloop::bench::run_scenario;
use gridloop::control::Event;
use gridloop::runner::RunOptions;

#[test]
fn echo_round_trips_are_exact() {
    let note = common::echo_exact(10).unwrap();
    println!("{note}");
}

#[test]
fn packets_written_before_the_vifsim_starts_arrive() {
    let note = common::prestart(5).unwrap();
    println!("{note}");
}

#[test]
fn tunnel_uses_datagrams_only_in_both_modes() {
    let note = common::datagram_only().unwrap();
    println!("{note}");
}

#[test]
fn periodic_pings_all_answered() {
    let spec = common::scenario("echo.toml");
    let rep = run_scenario(&spec, &RunOptions::default()).unwrap();
    for c in &rep.checks {
        assert!(c.ok, "{}: {}", c.name, c.detail);
    }
    assert!(rep.checks.iter().any(|c| c.name.contains("datagram-only")));
    let echoes: Vec<Event> = rep.events.iter().filter_map(|e| Event::from_value(&e.event)).collect();
    assert!(echoes.len() >= 8, "{echoes:?}");
    assert!(echoes.iter().all(|e| matches!(e, Event::Echo { ok: true, .. })), "{echoes:?}");
    assert_eq!(rep.areas["dedicated"].lost, 0);
}
