use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use harmcloud::service::router;
use harmcloud::Engine;
use harmcloud_core::fixtures::FixtureSet;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app() -> (Arc<Engine>, Router) {
    let eng = Arc::new(Engine::from_fixtures(&FixtureSet::bundled(), None).unwrap());
    (eng.clone(), router(eng))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn raw_post(app: &Router, uri: &str, body: &str) -> (StatusCode, Value) {
    let req = Request::post(uri).body(Body::from(body.to_owned())).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn shuffle(vm: &str, host: &str) -> Value {
    json!({ "kind": "shuffle", "vm_id": vm, "target_host_id": host })
}

#[tokio::test]
async fn harm_lists_every_vm_and_the_internet() {
    let (_, app) = app();
    let (status, body) = call(&app, "GET", "/harm", None).await;
    assert_eq!(status, StatusCode::OK);
    let nodes = body["harm"]["upper"]["nodes"].as_array().expect("node list");
    assert_eq!(nodes.len(), 18);
    assert!(nodes.iter().any(|n| n == "INTERNET"));
}

#[tokio::test]
async fn inventory_and_metrics_report_the_current_version() {
    let (eng, app) = app();
    let (_, inv) = call(&app, "GET", "/inventory", None).await;
    assert_eq!(inv["version"], eng.version());
    assert_eq!(inv["inventory"]["vms"].as_array().unwrap().len(), 17);
    let (status, m) = call(&app, "GET", "/metrics?pool=risk,cost", None).await;
    assert_eq!(status, StatusCode::OK);
    let values = m["report"]["values"].as_object().unwrap();
    assert_eq!(values.len(), 2);
    assert!(values.contains_key("system_risk"));
    assert!(values.contains_key("attack_cost"));
}

#[tokio::test]
async fn unknown_metric_and_version_map_to_client_errors() {
    let (_, app) = app();
    let (status, body) = call(&app, "GET", "/metrics?pool=speed", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "UNKNOWN_METRIC");
    let (status, body) = call(&app, "GET", "/harm?version=99", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "UNKNOWN_VERSION");
    let (status, body) = call(&app, "GET", "/metrics?max_depth=3", None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "PATH_EXPLOSION");
}

#[tokio::test]
async fn whatif_is_pure_and_reads_have_no_side_effects() {
    let (eng, app) = app();
    let (_, before) = call(&app, "GET", "/harm", None).await;
    let (status, w) = call(
        &app,
        "POST",
        "/whatif",
        Some(json!({ "action": { "kind": "redundancy", "vm_id": "vm4-EP2", "replica_count": 1 } })),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert!(w["delta"]["after"]["path_count"].as_u64() > w["delta"]["before"]["path_count"].as_u64());
    for uri in ["/inventory", "/metrics", "/actions", "/history"] {
        let (status, _) = call(&app, "GET", uri, None).await;
        assert_eq!(status, StatusCode::OK, "{uri}");
    }
    let (_, after) = call(&app, "GET", "/harm", None).await;
    assert_eq!(before, after);
    assert!(eng.deployments().is_empty());
    assert_eq!(eng.history().len(), 1);
}

#[tokio::test]
async fn apply_then_history_records_the_migration() {
    let (eng, app) = app();
    let v0 = eng.version();
    let (status, body) = call(&app, "POST", "/actions/apply", Some(json!({ "action": shuffle("vm6-EP2", "h1") }))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["version"], v0 + 1);
    let (_, hist) = call(&app, "GET", "/history", None).await;
    let records = hist["records"].as_array().unwrap();
    assert_eq!(records.len(), 1);
    let ops: Vec<&Value> = records[0]["calls"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| !c["ot_ms"].is_null())
        .collect();
    assert_eq!(ops.len(), 1);
    assert_eq!(ops[0]["ot_ms"], 7216);
    let snaps = hist["snapshots"].as_array().unwrap();
    assert_eq!(snaps.len(), 2);
    assert_eq!(snaps[1]["provenance"]["source"], "action");
    assert!(snaps[1]["provenance"].get("record").is_none());

    let (_, harm) = call(&app, "GET", "/harm", None).await;
    assert_eq!(harm["version"], v0 + 1);
    let (_, old) = call(&app, "GET", &format!("/harm?version={v0}"), None).await;
    assert_eq!(old["version"], v0);
    assert_ne!(old["harm"], harm["harm"]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_applies_against_one_version_admit_one() {
    let (eng, app) = app();
    let v0 = eng.version();
    let mut tasks = Vec::new();
    for host in ["h0", "h1", "h3", "h0", "h1", "h3"] {
        let app = app.clone();
        let body = json!({ "action": shuffle("vm6-EP2", host), "version": v0 });
        tasks.push(tokio::spawn(async move { call(&app, "POST", "/actions/apply", Some(body)).await }));
    }
    let mut ok = 0;
    for t in tasks {
        let (status, body) = t.await.unwrap();
        match status {
            StatusCode::OK => ok += 1,
            StatusCode::CONFLICT => assert_eq!(body["error"]["code"], "VERSION_CONFLICT"),
            other => panic!("unexpected {other}: {body}"),
        }
    }
    assert_eq!(ok, 1);
    assert_eq!(eng.version(), v0 + 1);
    assert_eq!(eng.deployments().len(), 1);
}

#[tokio::test]
async fn malformed_and_invalid_actions_are_rejected_without_changes() {
    let (eng, app) = app();
    let v0 = eng.version();
    let (status, body) = raw_post(&app, "/actions/apply", "{\"action\":{\"kind\":\"teleport\"}}").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "MALFORMED_ACTION");
    let (status, body) = raw_post(&app, "/whatif", "not json").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "MALFORMED_ACTION");

    let (status, body) = call(&app, "POST", "/actions/apply", Some(json!({ "action": shuffle("vm6-EP2", "h2") }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "CONSTRAINT_VIOLATION");
    assert_eq!(body["version"], v0);
    assert_eq!(eng.version(), v0);
    assert!(eng.deployments().is_empty());
}

#[tokio::test]
async fn rescan_appends_a_snapshot() {
    let (eng, app) = app();
    let v0 = eng.version();
    let (status, body) = call(&app, "POST", "/rescan", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["version"], v0 + 1);
    assert_eq!(body["calls"].as_array().unwrap().len(), 5);
}
