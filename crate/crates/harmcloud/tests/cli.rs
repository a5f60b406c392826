use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn harmcloud(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harmcloud"))
        .args(args)
        .env_remove("HARMCLOUD_FIXTURES")
        .output()
        .unwrap()
}

fn with_stdin(args: &[&str], input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_harmcloud"))
        .args(args)
        .env_remove("HARMCLOUD_FIXTURES")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json_of(o: &Output) -> Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn metrics_text_lists_the_pool() {
    let o = harmcloud(&["metrics", "--pool", "risk,prob"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.lines().any(|l| l.starts_with("system_risk ")));
    assert!(text.lines().any(|l| l.starts_with("prob_attack_success ")));
    assert!(!text.contains("mtta"));
}

#[test]
fn harm_export_formats() {
    let dot = stdout(&harmcloud(&["harm", "export", "--format", "dot"]));
    assert!(dot.starts_with("digraph"));
    let doc: Value = serde_json::from_str(&stdout(&harmcloud(&["harm", "export", "--format", "json"]))).unwrap();
    assert_eq!(doc["entry_points"].as_array().unwrap().len(), 4);
}

#[test]
fn strict_caps_fail_with_a_coded_exit() {
    let o = harmcloud(&["paths", "--max-depth", "3"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[PATH_EXPLOSION]"));
    let lossy = harmcloud(&["--output", "json", "paths", "--max-depth", "3", "--lossy"]);
    assert_eq!(json_of(&lossy)["truncated"], true);
}

#[test]
fn malformed_action_file_is_rejected() {
    let o = with_stdin(&["mtd", "whatif", "--action", "-"], "{\"kind\": \"teleport\"}");
    assert!(!o.status.success());
    assert_ne!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("MALFORMED_ACTION"));
    let json_err = with_stdin(&["--output", "json", "mtd", "whatif", "--action", "-"], "[]");
    let err: Value = serde_json::from_slice(&json_err.stderr).unwrap();
    assert_eq!(err["error"]["code"], "MALFORMED_ACTION");
}

#[test]
fn whatif_accepts_bare_and_wrapped_actions() {
    let bare = r#"{"kind":"redundancy","vm_id":"vm4-EP2","replica_count":2}"#;
    let a = json_of(&with_stdin(&["--output", "json", "mtd", "whatif", "--action", "-"], bare));
    let wrapped = format!(r#"{{"action":{bare},"pool":["risk"]}}"#);
    let b = json_of(&with_stdin(&["--output", "json", "mtd", "whatif", "--action", "-"], &wrapped));
    assert_eq!(a["delta"]["before"]["path_count"], 12);
    // Four of the twelve paths cross vm4-EP2; each of those gains two replica copies.
    assert_eq!(a["delta"]["after"]["path_count"], 20);
    assert_eq!(b["delta"]["after"]["values"].as_object().unwrap().len(), 1);
    assert_eq!(a["delta"]["after"]["values"]["system_risk"], b["delta"]["after"]["values"]["system_risk"]);
}

#[test]
fn apply_persists_into_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let action = dir.path().join("a.json");
    std::fs::write(&action, r#"{"kind":"shuffle","vm_id":"vm6-EP2","target_host_id":"h1"}"#).unwrap();
    let s = store.to_str().unwrap();
    let a = action.to_str().unwrap();
    let rec = json_of(&harmcloud(&["--store", s, "--output", "json", "mtd", "apply", "--action", a]));
    assert_eq!(rec["record"]["outcome"], "success");
    assert_eq!(std::fs::read_dir(&store).unwrap().count(), 2);
    let again = harmcloud(&["--store", s, "mtd", "apply", "--action", a]);
    assert!(String::from_utf8_lossy(&again.stderr).contains("SAME_HOST"));
    let inv: Value = serde_json::from_str(&stdout(&harmcloud(&["--store", s, "harm", "export"]))).unwrap();
    assert_eq!(inv["placement"]["vm6-EP2"], "h1");
}

#[test]
fn record_then_replay_scan() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("rec");
    let r = rec.to_str().unwrap();
    assert!(harmcloud(&["provider", "record", "--out", r]).status.success());
    for f in ["auth.json", "servers.json", "ports.json", "images.json", "scanner_session.json", "scanner_vulns.json"] {
        assert!(Path::new(r).join(f).exists(), "{f}");
    }
    let out = json_of(&harmcloud(&["--output", "json", "scan", "--recorded", r]));
    assert_eq!(out["vms"], 17);
    assert_eq!(out["ledger"]["cloud_informative_rt_ms"], 2562);
    assert_eq!(out["ledger"]["scanner_informative_rt_ms"], 4509);
}

#[test]
fn fixture_directory_selects_another_cloud() {
    let chain = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/chain");
    let o = harmcloud(&["--fixtures", chain, "--output", "json", "paths"]);
    assert_eq!(json_of(&o)["paths"].as_array().unwrap().len(), 1);
    let missing = harmcloud(&["--fixtures", "/nonexistent", "metrics"]);
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error[FIXTURE_IO]"));
}
