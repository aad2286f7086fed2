use std::path::PathBuf;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use hilo_gateway::{router, AppState};

fn app() -> Router {
    router(AppState::new(None))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or(Body::empty(), |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn call_json(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("{uri}: {e}: {}", String::from_utf8_lossy(&bytes)))
    };
    (status, v)
}

fn assert_schema(name: &str, instance: &Value) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("schemas").join(name);
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(instance).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}\n{instance}");
}

fn small_dataset() -> Value {
    json!({"spec": {"frames": 450}, "seed": 3})
}

async fn events(app: &Router, id: &str) -> Vec<Value> {
    let (status, bytes) = call(app, Method::GET, &format!("/experiments/{id}/events"), None).await;
    assert_eq!(status, StatusCode::OK);
    String::from_utf8(bytes)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[tokio::test]
async fn full_lifecycle() {
    let app = app();
    let (status, ds) = call_json(&app, Method::POST, "/datasets", Some(small_dataset())).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_schema("dataset_created.json", &ds);
    assert_eq!(ds["frames"], 450);

    let cfg = json!({"dataset": {"kind": "id", "id": ds["dataset_id"]}, "seed": 3});
    let (status, created) = call_json(&app, Method::POST, "/experiments", Some(cfg)).await;
    assert_eq!(status, StatusCode::CREATED, "{created}");
    assert_schema("experiment_created.json", &created);
    assert_eq!(created["status"], "finished");
    assert_eq!(created["chunks"], 2);
    let id = created["experiment_id"].as_str().unwrap();

    let (status, m) = call_json(&app, Method::GET, &format!("/experiments/{id}/metrics"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_schema("metrics_report.json", &m);
    for key in ["normalized_bandwidth", "f1", "cloud_cost"] {
        assert!(m[key].as_f64().unwrap() > 0.0, "{key}");
    }
    assert!(m["latency"]["p50_s"].as_f64().unwrap() > 0.0);

    let (status, s) = call_json(&app, Method::GET, &format!("/experiments/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_schema("experiment_status.json", &s);
    assert_eq!(s["chunks_done"], 2);

    let evs = events(&app, id).await;
    for e in &evs {
        assert_schema("engine_event.json", e);
    }
    assert_eq!(evs.last().unwrap()["type"], "finished");
    assert_eq!(evs.iter().filter(|e| e["type"] == "chunk").count(), 2);

    let (status, l) = call_json(&app, Method::GET, &format!("/experiments/{id}/learner"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_schema("learner_status.json", &l);
}

#[tokio::test]
async fn metrics_match_a_direct_run() {
    let app = app();
    let cfg = json!({"seed": 5, "dataset": {"kind": "generate", "spec": {"frames": 450}}});
    let (_, created) = call_json(&app, Method::POST, "/experiments", Some(cfg.clone())).await;
    let id = created["experiment_id"].as_str().unwrap();
    let (_, m) = call_json(&app, Method::GET, &format!("/experiments/{id}/metrics"), None).await;
    let direct = hilo_core::engine::run_experiment(serde_json::from_value(cfg).unwrap()).unwrap();
    assert_eq!(m, serde_json::to_value(&direct.report).unwrap());
}

#[tokio::test]
async fn invalid_config_lists_fields() {
    let app = app();
    let bad = json!({"network": {"wan_mbps": 0.0}, "protocol": {"thresholds": {"iou": 1.5}}});
    let (status, e) = call_json(&app, Method::POST, "/experiments", Some(bad)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_schema("error.json", &e);
    assert_eq!(e["code"], "invalid_config");
    let fields: Vec<&str> = e["errors"].as_array().unwrap().iter().map(|f| f["field"].as_str().unwrap()).collect();
    assert!(fields.contains(&"network") && fields.contains(&"protocol"), "{fields:?}");

    let (status, e) = call_json(&app, Method::POST, "/experiments", Some(json!({"learner": {"budget": "many"}}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(e["field"], "learner.budget");

    let (status, e) = call_json(&app, Method::POST, "/experiments", Some(json!({"dataset": {"kind": "id", "id": "nope"}}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(e["field"], "dataset.id");

    let req = Request::post("/experiments").body(Body::from("{not json")).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn unknown_ids_are_404() {
    let app = app();
    for uri in ["/experiments/exp-9/metrics", "/experiments/exp-9/events", "/experiments/exp-9/annotations/next"] {
        let (status, e) = call_json(&app, Method::GET, uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert_schema("error.json", &e);
    }
    let (status, _) = call_json(&app, Method::POST, "/annotations/exp-9.0", Some(json!({"class_id": 1}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call_json(&app, Method::POST, "/annotations/garbage", Some(json!({"class_id": 1}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

/// Batch run with human labels left to the API; tasks stay queued afterwards.
async fn external_experiment(app: &Router, budget: usize) -> String {
    let cfg = json!({
        "seed": 3,
        "dataset": {"kind": "generate", "spec": {"frames": 450}},
        "annotator": {"mode": "external"},
        "learner": {"budget": budget}
    });
    let (status, created) = call_json(app, Method::POST, "/experiments", Some(cfg)).await;
    assert_eq!(status, StatusCode::CREATED, "{created}");
    created["experiment_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn annotation_round_trip() {
    let app = app();
    let id = external_experiment(&app, 200).await;
    let next = format!("/experiments/{id}/annotations/next");

    let (status, task) = call_json(&app, Method::GET, &next, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_schema("annotation_task.json", &task);
    assert_eq!(task["state"], "claimed");
    let task_id = task["task_id"].as_str().unwrap().to_string();

    let (_, before) = call_json(&app, Method::GET, &format!("/experiments/{id}/learner"), None).await;
    let class = task["model_prediction"]["class_id"].clone();
    let (status, ack) = call_json(&app, Method::POST, &format!("/annotations/{task_id}"), Some(json!({"class_id": class}))).await;
    assert_eq!(status, StatusCode::OK, "{ack}");
    assert_schema("label_accepted.json", &ack);
    assert_ne!(ack["learner_hash"], before["learner_hash"]);
    assert_eq!(ack["budget_remaining"], 199);

    let (status, e) = call_json(&app, Method::POST, &format!("/annotations/{task_id}"), Some(json!({"class_id": class}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(e["code"], "already_labeled");

    let (status, e) = call_json(&app, Method::POST, &format!("/annotations/{task_id}"), Some(json!({"class_id": 999}))).await;
    assert!(status == StatusCode::CONFLICT || status == StatusCode::BAD_REQUEST, "{e}");

    // the stream carries the training event
    let evs = events(&app, &id).await;
    assert!(evs.iter().any(|e| e["type"] == "training"));
}

#[tokio::test]
async fn concurrent_claims_are_disjoint() {
    let app = app();
    let id = external_experiment(&app, 200).await;
    let next = format!("/experiments/{id}/annotations/next");
    let mut handles = Vec::new();
    for _ in 0..8 {
        let app = app.clone();
        let next = next.clone();
        handles.push(tokio::spawn(async move { call_json(&app, Method::GET, &next, None).await }));
    }
    let mut ids = Vec::new();
    for h in handles {
        let (status, task) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        ids.push(task["task_id"].as_str().unwrap().to_string());
    }
    let n = ids.len();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), n);
}

#[tokio::test]
async fn budget_exhaustion_is_410() {
    let app = app();
    let id = external_experiment(&app, 3).await;
    let next = format!("/experiments/{id}/annotations/next");
    let mut last = Value::Null;
    let mut first_id = String::new();
    for i in 0..3 {
        let (status, task) = call_json(&app, Method::GET, &next, None).await;
        assert_eq!(status, StatusCode::OK);
        let tid = task["task_id"].as_str().unwrap().to_string();
        if i == 0 {
            first_id = tid.clone();
        }
        let (status, ack) = call_json(&app, Method::POST, &format!("/annotations/{tid}"), Some(json!({"class_id": 0}))).await;
        assert_eq!(status, StatusCode::OK);
        last = ack;
    }
    assert_eq!(last["budget_remaining"], 0);
    assert_eq!(last["finalized"], true);

    let (status, e) = call_json(&app, Method::GET, &next, None).await;
    assert_eq!(status, StatusCode::GONE);
    assert_eq!(e["code"], "budget_exhausted");
    let (status, _) = call_json(&app, Method::POST, &format!("/annotations/{first_id}"), Some(json!({"class_id": 0}))).await;
    assert_eq!(status, StatusCode::GONE);
}

async fn live_experiment(app: &Router, pacing: f64) -> String {
    let cfg = json!({
        "seed": 3,
        "mode": "live",
        "pacing": pacing,
        "annotator": {"mode": "external"},
        "dataset": {"kind": "generate", "spec": {"frames": 900}}
    });
    let (status, created) = call_json(app, Method::POST, "/experiments", Some(cfg)).await;
    assert_eq!(status, StatusCode::CREATED, "{created}");
    assert_eq!(created["status"], "running");
    created["experiment_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn empty_queue_is_204() {
    let app = app();
    let id = live_experiment(&app, 1.0).await;
    let (status, body) = call(&app, Method::GET, &format!("/experiments/{id}/annotations/next"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    assert!(body.is_empty());
}

#[tokio::test]
async fn kill_cloud_flips_labels_to_backup() {
    let app = app();
    let id = live_experiment(&app, 40.0).await;
    let ctl = format!("/experiments/{id}/control");

    let (status, ev) = call_json(&app, Method::POST, &ctl, Some(json!({"action": "pause"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_schema("engine_event.json", &ev);
    let (_, s) = call_json(&app, Method::GET, &format!("/experiments/{id}"), None).await;
    assert_eq!(s["status"], "paused");

    let (status, ev) = call_json(&app, Method::POST, &ctl, Some(json!({"action": "kill_cloud"}))).await;
    assert_eq!(status, StatusCode::OK);
    let killed_at = ev["at"].as_u64().unwrap();
    let (status, _) = call_json(&app, Method::POST, &ctl, Some(json!({"action": "resume"}))).await;
    assert_eq!(status, StatusCode::OK);

    // rolling metrics are available mid-run
    let (status, _) = call_json(&app, Method::GET, &format!("/experiments/{id}/metrics"), None).await;
    assert_eq!(status, StatusCode::OK);

    let evs = tokio::time::timeout(Duration::from_secs(30), events(&app, &id)).await.unwrap();
    for e in &evs {
        assert_schema("engine_event.json", e);
    }
    let kinds: Vec<&str> = evs
        .iter()
        .filter(|e| e["type"] == "control")
        .map(|e| e["control"]["action"].as_str().unwrap())
        .collect();
    assert_eq!(kinds, ["pause", "kill_cloud", "resume"]);
    let period_us = 7_500_000;
    let chunks: Vec<&Value> = evs
        .iter()
        .filter(|e| e["type"] == "chunk")
        .map(|e| &e["trace"])
        .filter(|t| t["stages"][0]["at"].as_u64().unwrap() >= killed_at + period_us)
        .collect();
    assert!(!chunks.is_empty());
    let mut backup_labels = 0;
    for t in chunks {
        assert_eq!(t["outcome"], "labeled_by_backup");
        for l in t["labels"].as_array().unwrap() {
            assert_eq!(l["source"], "backup");
            backup_labels += 1;
        }
    }
    assert!(backup_labels > 0);

    let (status, e) = call_json(&app, Method::POST, &ctl, Some(json!({"action": "restore_cloud"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(e["code"], "finished");
}

#[tokio::test]
async fn bad_control_requests() {
    let app = app();
    let id = live_experiment(&app, 1.0).await;
    let ctl = format!("/experiments/{id}/control");
    let (status, e) = call_json(&app, Method::POST, &ctl, Some(json!({"action": "explode"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_schema("error.json", &e);
    let (status, e) = call_json(&app, Method::POST, &ctl, Some(json!({"action": "set_policy", "policy_id": "nope"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(e["field"], "policy_id");
    let (status, _) = call_json(&app, Method::POST, &ctl, Some(json!({"action": "set_policy", "policy_id": "hold_for_cloud"}))).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn default_seed_applies_to_requests_without_one() {
    let app = router(AppState::new(Some(42)));
    let cfg = json!({"dataset": {"kind": "generate", "spec": {"frames": 450}}});
    let (_, created) = call_json(&app, Method::POST, "/experiments", Some(cfg.clone())).await;
    let id = created["experiment_id"].as_str().unwrap();
    let (_, m) = call_json(&app, Method::GET, &format!("/experiments/{id}/metrics"), None).await;
    let mut seeded = cfg;
    seeded["seed"] = 42.into();
    let direct = hilo_core::engine::run_experiment(serde_json::from_value(seeded).unwrap()).unwrap();
    assert_eq!(m, serde_json::to_value(&direct.report).unwrap());
}
