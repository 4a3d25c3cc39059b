mod common;

use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tokio::runtime::Runtime;
use tower::ServiceExt;

use mapek_core::controller::Controller;
use mapek_core::gateway::{router, GatewayState, SCHEMA_VERSION};

use common::*;

struct Harness {
    rt: Runtime,
    app: Router,
    c: Controller,
}

impl Harness {
    fn new(scenario: &str, config: &str, ticks: u64) -> Self {
        let mut c = controller(scenario, config, None);
        c.run(ticks).unwrap();
        let app = router(GatewayState::live(c.handle(), c.config()));
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(1).enable_all().build().unwrap();
        Harness { rt, app, c }
    }

    fn get(&self, uri: &str) -> (StatusCode, Value) {
        let req = Request::get(uri).body(Body::empty()).unwrap();
        self.rt.block_on(call(self.app.clone(), req))
    }

    /// Sends a POST and services the command queue until it is answered.
    fn post(&mut self, uri: &str, body: Value) -> (StatusCode, Value) {
        let req = Request::builder()
            .method(Method::POST)
            .uri(uri)
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap();
        let reply = self.rt.spawn(call(self.app.clone(), req));
        let deadline = Instant::now() + Duration::from_secs(10);
        while !reply.is_finished() {
            self.c.wait_for_commands(Duration::from_millis(10));
            assert!(Instant::now() < deadline, "request never answered");
        }
        self.rt.block_on(reply).unwrap()
    }
}

async fn call(app: Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn decision(d: &str) -> Value {
    json!({"decision": d, "decider": "human:ops"})
}

#[test]
fn no_pending_approvals_is_an_empty_list() {
    let h = Harness::new("s2_cert_expiry", "s2_config", 10);
    let (status, body) = h.get("/api/approvals?status=pending");
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["approvals"], json!([]));
    assert_eq!(body["schema_version"], SCHEMA_VERSION);
}

#[test]
fn approve_once_then_conflict() {
    let mut h = Harness::new("s2_cert_expiry", "s2_config", 40);
    let (_, body) = h.get("/api/approvals?status=pending");
    let id = body["approvals"][0]["request_id"].as_str().unwrap().to_string();

    let (status, body) = h.post(&format!("/api/approvals/{id}"), decision("approved"));
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["result"]["final_status"], "completed");

    let (_, body) = h.get("/api/approvals");
    let entry = body["approvals"].as_array().unwrap().iter().find(|a| a["request_id"] == id.as_str()).unwrap().clone();
    assert_eq!(entry["status"], "approved");
    assert_eq!(entry["decider"], "human:ops");
    assert_eq!(h.get("/api/approvals?status=pending").1["approvals"], json!([]));

    let (status, body) = h.post(&format!("/api/approvals/{id}"), decision("rejected"));
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "conflict");
}

#[test]
fn reject_runs_nothing() {
    let mut h = Harness::new("s2_cert_expiry", "s2_config", 40);
    let id = h.get("/api/approvals").1["approvals"][0]["request_id"].as_str().unwrap().to_string();
    let (status, body) = h.post(&format!("/api/approvals/{id}"), decision("rejected"));
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["result"]["final_status"], "rejected");
    assert!(of_kind(&entries(&h.c), mapek_core::knowledge::EntryKind::StepApplied).is_empty());
}

#[test]
fn unknown_request_and_bad_bodies() {
    let mut h = Harness::new("s2_cert_expiry", "s2_config", 40);
    let (status, body) = h.post("/api/approvals/approval-nope", decision("approved"));
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "not_found");

    for bad in
        [json!({"decision": "maybe", "decider": "x"}), json!({"decision": "approved"}), json!({"decision": "approved", "decider": "  "})]
    {
        let (status, body) = h.post("/api/approvals/approval-nope", bad);
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_eq!(body["schema_version"], SCHEMA_VERSION);
    }
    assert_eq!(h.get("/api/approvals?status=sideways").0, StatusCode::BAD_REQUEST);
    assert_eq!(h.get("/api/journal?limit=0").0, StatusCode::BAD_REQUEST);
    assert_eq!(h.get("/api/journal?from_seq=x").0, StatusCode::BAD_REQUEST);
    let (status, body) = h.get("/api/nothing");
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "not_found");
}

#[test]
fn reads_do_not_touch_the_journal() {
    let h = Harness::new("s2_cert_expiry", "s2_config", 45);
    let before = h.c.journal().digest();
    for uri in [
        "/api/state",
        "/api/anomalies",
        "/api/anomalies?cycle_from=10",
        "/api/approvals",
        "/api/escalations",
        "/api/journal",
        "/api/config",
    ] {
        let (status, body) = h.get(uri);
        assert_eq!(status, StatusCode::OK, "{uri}");
        assert_eq!(body["schema_version"], SCHEMA_VERSION, "{uri}");
    }
    assert_eq!(h.c.journal().digest(), before);
    let state = h.get("/api/state").1;
    assert_eq!(state["digest"], before.as_str());
    assert_eq!(state["pending_approvals"], 1);
    assert_eq!(state["tick"], 45);
}

#[test]
fn journal_pages_cover_every_entry_once() {
    let h = Harness::new("s1_memory_leak", "s1_config", 60);
    let total = h.c.journal().next_seq();
    let mut seen = Vec::new();
    let mut from = Some(0);
    while let Some(f) = from {
        let (_, body) = h.get(&format!("/api/journal?from_seq={f}&limit=7"));
        seen.extend(body["entries"].as_array().unwrap().iter().map(|e| e["seq"].as_u64().unwrap()));
        from = body["next_seq"].as_u64();
    }
    assert_eq!(seen, (0..total).collect::<Vec<_>>());
}

#[test]
fn anomalies_filter_by_cycle() {
    let h = Harness::new("s3_degradation_loop", "s3_config", 12);
    let all = h.get("/api/anomalies").1["anomalies"].as_array().unwrap().clone();
    let late = h.get("/api/anomalies?cycle_from=4").1["anomalies"].as_array().unwrap().clone();
    assert!(!late.is_empty() && late.len() < all.len());
    assert!(late.iter().all(|a| a["cycle"].as_u64().unwrap() >= 4));
    assert!(all.iter().all(|a| a.get("signature").is_some() && a.get("seq").is_some()));
}

#[test]
fn escalation_acknowledgement() {
    let mut h = Harness::new("s3_degradation_loop", "s3_config", 8);
    let (_, body) = h.get("/api/escalations");
    let esc = body["escalations"][0].clone();
    assert_eq!(esc["reason"], "loop_suppressed");
    let id = esc["escalation_id"].as_str().unwrap().to_string();

    let (status, body) = h.post(&format!("/api/escalations/{id}/ack"), json!({"by": "human:ops"}));
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(h.get("/api/escalations").1["escalations"][0]["acknowledged"], true);
    assert_eq!(h.post(&format!("/api/escalations/{id}/ack"), json!({"by": "human:ops"})).0, StatusCode::CONFLICT);
    assert_eq!(h.post("/api/escalations/esc-0/ack", json!({"by": "human:ops"})).0, StatusCode::NOT_FOUND);
}

#[test]
fn unanswered_decision_times_out() {
    let (mut config, scenario) = load("s2_cert_expiry", "s2_config");
    config.gateway.decision_timeout_ms = 50;
    let mut c = Controller::new(config, &scenario, 0).unwrap();
    c.run(40).unwrap();
    let app = router(GatewayState::live(c.handle(), c.config()));
    let rt = Runtime::new().unwrap();
    let req = Request::post("/api/approvals/x")
        .header("content-type", "application/json")
        .body(Body::from(decision("approved").to_string()))
        .unwrap();
    let (status, body) = rt.block_on(call(app, req));
    assert_eq!(status, StatusCode::GATEWAY_TIMEOUT);
    assert_eq!(body["error"], "timeout");
}

#[test]
fn read_only_mode_refuses_writes() {
    let mut c = controller("s2_cert_expiry", "s2_config", None);
    c.run(45).unwrap();
    let entries = entries(&c);
    let app = router(GatewayState::read_only(entries, c.journal().digest(), Some(c.config())));
    let rt = Runtime::new().unwrap();
    let (status, body) = rt.block_on(call(app.clone(), Request::get("/api/approvals?status=pending").body(Body::empty()).unwrap()));
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["approvals"].as_array().unwrap().len(), 1);
    let state = rt.block_on(call(app.clone(), Request::get("/api/state").body(Body::empty()).unwrap())).1;
    assert_eq!(state["live"], false);
    assert_eq!(state["digest"], c.journal().digest().as_str());

    let req = Request::post("/api/approvals/x")
        .header("content-type", "application/json")
        .body(Body::from(decision("approved").to_string()))
        .unwrap();
    let (status, body) = rt.block_on(call(app, req));
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["error"], "read_only");
}

#[test]
fn cors_preflight_is_allowed() {
    let h = Harness::new("s2_cert_expiry", "s2_config", 1);
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/api/approvals/x")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let resp = h.rt.block_on(h.app.clone().oneshot(req)).unwrap();
    assert!(resp.status().is_success());
    assert!(resp.headers().contains_key("access-control-allow-origin"));
}
