use std::path::PathBuf;

use gridloop::runner::{RunOptions, Session};
use gridloop::scenario::ScenarioSpec;

/// Closed loop replayed by hand: the controller sees the previous step's
/// feeder voltage, answers `clamp(200 (v - 1), -50, 50)` when the voltage
/// changed, and the grid adds that to the feeder load in the same step.
fn replay(steps: usize) -> Vec<(f64, f64)> {
    let (load0, cap) = (400.0, 500.0);
    let mut net = load0;
    let mut seen: Option<f64> = None;
    let mut prev: Option<f64> = None;
    let mut out = Vec::new();
    for _ in 0..steps {
        if let Some(v) = prev {
            if seen != Some(v) {
                seen = Some(v);
                net += (200.0 * (v - 1.0)).clamp(-50.0, 50.0);
            }
        }
        let v = (1.0 - 0.01 * f64::abs(net) / cap).max(0.9);
        out.push((v, net));
        prev = Some(v);
    }
    out
}

#[test]
fn droop_controller_closes_the_loop() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/droop.toml");
    let spec = ScenarioSpec::load(&path).unwrap();
    let mut s = Session::start(&spec, &RunOptions::default()).unwrap();
    let want = replay(200);
    for (t, &(v, p)) in want.iter().enumerate() {
        s.step().unwrap();
        let st = s.grid().unwrap().state().clone();
        let r = &st.readings["feeder"];
        assert!((r.p_kw - p).abs() < 1e-9 && (r.v_pu - v).abs() < 1e-12, "t={t}: got {r:?}, want v={v} p={p}");
        assert!((st.flows["slack"] - p).abs() < 1e-9);
    }
    // The load decays by 0.4 % per step.
    let last = want.last().unwrap().1;
    assert!(last < 400.0 * 0.997f64.powi(199) && last > 0.0, "{last}");
    assert_eq!(s.apps().ticks("ctrl"), Some(200));
    let rep = s.finish();
    assert!(rep.clean(), "{:?}", rep.orphans);
}
