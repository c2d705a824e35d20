mod common;

use std::process::Command;

fn gridloop() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gridloop"))
}

#[test]
fn validate_accepts_the_bundled_scenarios() {
    for name in ["echo.toml", "droop.toml", "sweep.toml"] {
        let out = gridloop().arg("validate").arg(common::scenario_path(name)).output().unwrap();
        assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stdout));
    }
}

#[test]
fn validate_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(
        &path,
        r#"
[[apps]]
name = "a"
role = "client"
peer = "nobody"
"#,
    )
    .unwrap();
    let out = gridloop().arg("validate").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("seed is missing"), "{text}");
    assert!(text.lines().count() >= 2, "{text}");
}

#[test]
fn run_writes_report_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridloop()
        .arg("run")
        .arg(common::scenario_path("echo.toml"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    for f in ["report.csv", "report.json", "rtt.svg", "throughput.svg"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["passed"], serde_json::json!(true));
}

#[test]
fn unreadable_scenario_is_an_error() {
    let out = gridloop().arg("run").arg("/nonexistent/scenario.toml").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scenario.toml"));
}
