mod common;

use std::time::Duration;

use gridloop::runner::{RunOptions, Session};
use gridloop::scenario::ScenarioSpec;
use gridloop::supervisor::running_in_group;
use gridloop_core::SimTime;

fn spec(apps: &str) -> ScenarioSpec {
    let text = format!(
        r#"
seed = 3

[[subnets]]
name = "lan"
area = "dedicated"
index = 0
routers = ["r0"]
hosts = ["h1", "h2"]

{apps}
"#
    );
    ScenarioSpec::from_toml(&text).unwrap()
}

fn group_gone(pid: u32) -> bool {
    running_in_group(pid as i32) == Some(0)
}

#[test]
fn stubborn_app_is_killed_after_its_grace() {
    let s = spec(
        r#"
[[apps]]
name = "client"
node = "h1"
role = "client"
peer = "server"

[[apps]]
name = "server"
node = "h2"
role = "stubborn"
shutdown_grace_ms = 300
"#,
    );
    let mut sess = Session::start(&s, &RunOptions::default()).unwrap();
    sess.run_until(SimTime::from_millis(50)).unwrap();
    let pids = sess.apps().pids();
    let dg = sess.datagram_check();
    assert!(dg.ok(), "{dg:?}");
    let rep = sess.finish();
    let server = rep.exits.iter().find(|e| e.name == "server").unwrap();
    assert!(server.hard_killed, "{server:?}");
    assert_eq!(server.signal, Some(libc::SIGKILL));
    assert!(server.kill_after.unwrap() >= Duration::from_millis(300));
    let client = rep.exits.iter().find(|e| e.name == "client").unwrap();
    assert!(client.graceful && !client.hard_killed, "{client:?}");
    assert!(rep.clean(), "{:?}", rep.orphans);
    assert!(pids.values().all(|&p| group_gone(p)));
}

#[test]
fn grandchildren_of_a_custom_app_do_not_survive() {
    let s = spec(
        r#"
[[apps]]
name = "spawner"
command = ["/bin/sh", "-c", "sh -c 'trap \"\" TERM; sleep 30' & sleep 30 & wait"]
shutdown_grace_ms = 300
"#,
    );
    let mut sess = Session::start(&s, &RunOptions::default()).unwrap();
    sess.run_until(SimTime::from_millis(20)).unwrap();
    std::thread::sleep(Duration::from_millis(200));
    let pid = sess.apps().pids()["spawner"];
    let rep = sess.finish();
    assert!(group_gone(pid), "process group of {pid} still running");
    assert!(rep.exits[0].stragglers, "{:?}", rep.exits);
    assert!(rep.orphans.iter().all(|o| o.contains("stragglers")), "{:?}", rep.orphans);
}

#[test]
fn missing_executable_names_the_app() {
    let s = spec(
        r#"
[[apps]]
name = "ghost"
command = ["/nonexistent/gridloop-ghost"]
"#,
    );
    let err = Session::start(&s, &RunOptions::default()).err().expect("start must fail");
    let msg = err.to_string();
    assert!(msg.contains("ghost"), "{msg}");
}
