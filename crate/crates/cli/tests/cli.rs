use std::path::PathBuf;
use std::process::{Command, Output};

use ownlink_core::ledger::Ledger;
use ownlink_sim::scenario::{run, Scenario};

fn ownlink(args: &[&str], dir: &std::path::Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ownlink")).args(args).current_dir(dir).output().expect("binary runs")
}

fn bundled(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../sim/scenarios").join(format!("{name}.json"))
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn scenario_run_writes_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let file = bundled("academic");
    let out = ownlink(&["scenario", "run", file.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    let trace = std::fs::read_to_string(dir.path().join("academic.trace.ndjson")).unwrap();
    assert!(trace.lines().count() > 100);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn malformed_scenario_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    std::fs::write(&path, "{\n  \"name\": \"x\",\n  \"seed\": 1,\n  \"actors\": [,]\n}\n").unwrap();
    let out = ownlink(&["scenario", "run", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    assert!(err.contains("broken.json:4:"), "{err}");
}

#[test]
fn invalid_scenario_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let body = r#"{"name": "x", "seed": 1, "actors": [], "steps": [{"time": 0, "actor": "ghost", "op": "protocol/resolve_identity"}]}"#;
    std::fs::write(&path, body).unwrap();
    let out = ownlink(&["scenario", "run", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", text(&out.stderr));
}

#[test]
fn failing_assertion_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let mut s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(bundled("academic")).unwrap()).unwrap();
    s["assertions"].as_array_mut().unwrap().push(serde_json::json!({
        "kind": "state", "name": "impossible", "contract": "${alice_contract}", "equals": "claimed_strong"
    }));
    let path = dir.path().join("academic.json");
    std::fs::write(&path, s.to_string()).unwrap();
    let out = ownlink(&["scenario", "run", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1), "{}", text(&out.stderr));
    assert!(text(&out.stderr).contains("impossible"));
}

#[test]
fn exported_ledger_replays_to_identical_state() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["academic", "medical"] {
        let file = bundled(name);
        let out = ownlink(&["export", "ledger", file.to_str().unwrap()], dir.path());
        assert!(out.status.success(), "{}", text(&out.stderr));
        let ndjson = text(&out.stdout);
        let report = run(&Scenario::parse(&std::fs::read_to_string(&file).unwrap()).unwrap()).unwrap();
        let replayed = Ledger::replay_ndjson(report.exports.custodians.iter().copied(), &ndjson).unwrap();
        assert_eq!(replayed.canonical_state(), report.exports.ledger_state);
        assert_eq!(replayed.export_ndjson(), ndjson);
    }
}

#[test]
fn export_store_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let file = bundled("medical");
    let out = ownlink(&["export", "store", file.to_str().unwrap()], dir.path());
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["identity"].as_object().unwrap().len(), 2);
    assert_eq!(v["records"].as_array().unwrap().len(), 2);
    let out = ownlink(&["export", "trace", file.to_str().unwrap()], dir.path());
    assert!(out.status.success());
    assert!(text(&out.stdout).lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
}

#[test]
fn attack_eval_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let file = bundled("academic");
    assert!(ownlink(&["scenario", "run", file.to_str().unwrap(), "--trace", "t.ndjson"], dir.path()).status.success());
    let out = ownlink(&["attack", "eval", "t.ndjson", "--strategy", "uniform-guess"], dir.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    let reports: Vec<serde_json::Value> = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(reports.len(), 2);
    for r in &reports {
        for key in ["strategy", "k", "trials", "accuracy", "ci95"] {
            assert!(r.get(key).is_some(), "missing {key}");
        }
    }
    let out = ownlink(&["attack", "eval", "t.ndjson", "--strategy", "psychic"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn keygen_is_deterministic_with_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = ownlink(&["keygen", "--seed", "7", "--name", "alice"], dir.path());
    let b = ownlink(&["keygen", "--seed", "7", "--name", "alice"], dir.path());
    assert_eq!(a.stdout, b.stdout);
    let r1 = ownlink(&["keygen"], dir.path());
    let r2 = ownlink(&["keygen"], dir.path());
    assert_ne!(r1.stdout, r2.stdout);
}

#[test]
fn node_start_rejects_bad_config_and_busy_port() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("node.json");
    std::fs::write(&cfg, "{\"custodians\": [\"c\"], \"chaff_ratio\": 2.0}").unwrap();
    let out = ownlink(&["node", "start", "--config", cfg.to_str().unwrap()], dir.path());
    assert_ne!(out.status.code(), Some(0));
    assert!(text(&out.stderr).contains("chaff_ratio"), "{}", text(&out.stderr));

    let busy = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = busy.local_addr().unwrap().port().to_string();
    let out = ownlink(&["node", "start", "--port", &port], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("cannot bind"), "{}", text(&out.stderr));
}
