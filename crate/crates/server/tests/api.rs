use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use cowork_core::eeg::Classifier;
use cowork_core::gateway::wire::StreamEvent;
use cowork_core::scenario::Scenario;
use cowork_core::system::{default_classifier, SimConfig, Simulation};
use cowork_server::{router, AppState, ServerConfig};

fn classifier() -> Arc<Classifier> {
    static CLF: OnceLock<Arc<Classifier>> = OnceLock::new();
    CLF.get_or_init(|| Arc::new(default_classifier())).clone()
}

fn state() -> AppState {
    let sim = Simulation::new(Scenario::default(), classifier(), SimConfig { seed: 3, ..SimConfig::default() }).unwrap();
    AppState::new(sim, &ServerConfig::default())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

fn advance(st: &AppState, ms: u64) {
    st.with_sim(|s| {
        let until = s.now_ms() + ms;
        s.run_until(until).unwrap();
    });
}

fn mentions(plan: &Value, from: usize, block: &str) -> bool {
    plan.as_array().unwrap()[from..].iter().any(|a| a.as_str().unwrap().contains(block))
}

#[tokio::test]
async fn plan_reports_running_five_step_plan() {
    let app = router(state());
    let (code, v) = call(&app, "GET", "/api/v1/plan", None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(v["state"], "running");
    assert_eq!(v["step_index"], 0);
    assert_eq!(v["plan"].as_array().unwrap().len(), 5);
}

#[tokio::test]
async fn unknown_route_is_404() {
    let app = router(state());
    let (code, v) = call(&app, "GET", "/api/v1/nothing", None).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    assert!(v["error"].is_string());
    assert_eq!(call(&app, "GET", "/plan", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn malformed_bodies_are_400() {
    let app = router(state());
    for body in ["{", r#"{"block": "teal"}"#, r#"{"blok": "green"}"#, ""] {
        assert_eq!(call(&app, "POST", "/api/v1/claim", Some(body)).await.0, StatusCode::BAD_REQUEST, "{body}");
    }
    assert_eq!(call(&app, "POST", "/api/v1/control", Some(r#"{"command": "jump"}"#)).await.0, StatusCode::BAD_REQUEST);
    let over = r#"{"metric": "stress", "value": 1.5}"#;
    assert_eq!(call(&app, "POST", "/api/v1/affect_override", Some(over)).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "GET", "/api/v1/alerts?since=soon", None).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn claim_replans_and_is_idempotent() {
    let st = state();
    let app = router(st.clone());
    let (code, v) = call(&app, "POST", "/api/v1/claim", Some(r#"{"block": "green"}"#)).await;
    assert_eq!(code, StatusCode::OK);
    let status = &v["status"];
    assert_eq!(status["claimed"], json!(["green"]));
    let from = status["step_index"].as_u64().unwrap() as usize;
    assert!(!mentions(&status["plan"], from, "green"));

    let (code, again) = call(&app, "POST", "/api/v1/claim", Some(r#"{"block": "green"}"#)).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(again["status"]["claimed"], json!(["green"]));
}

#[tokio::test]
async fn claiming_grasped_block_conflicts() {
    let st = state();
    let app = router(st.clone());
    let mut held = None;
    for _ in 0..200 {
        advance(&st, 50);
        held = st.with_sim(|s| s.executor().world().held());
        if held.is_some() {
            break;
        }
    }
    let block = held.expect("robot picks a block up");
    let body = json!({ "block": block }).to_string();
    let (code, v) = call(&app, "POST", "/api/v1/claim", Some(&body)).await;
    assert_eq!(code, StatusCode::CONFLICT);
    assert!(v["error"].as_str().unwrap().contains(&block.to_string()));
}

#[tokio::test]
async fn control_transitions() {
    let st = state();
    let app = router(st.clone());
    let resume = r#"{"command": "resume"}"#;
    assert_eq!(call(&app, "POST", "/api/v1/control", Some(resume)).await.0, StatusCode::CONFLICT);
    let (code, _) = call(&app, "POST", "/api/v1/control", Some(r#"{"command": "stop"}"#)).await;
    assert_eq!(code, StatusCode::OK);
    advance(&st, 50);
    assert_eq!(st.with_sim(|s| s.executor().status().state.to_string()), "halted");
    assert_eq!(call(&app, "POST", "/api/v1/control", Some(resume)).await.0, StatusCode::OK);
    advance(&st, 50);
    assert_eq!(st.with_sim(|s| s.executor().status().state.to_string()), "running");
}

#[tokio::test]
async fn blink_halts_and_raises_alert() {
    let st = state();
    let app = router(st.clone());
    advance(&st, 1000);
    let (code, _) = call(&app, "POST", "/api/v1/blink", None).await;
    assert_eq!(code, StatusCode::OK);
    advance(&st, 1000);
    let (_, plan) = call(&app, "GET", "/api/v1/plan", None).await;
    assert_eq!(plan["state"], "halted");
    assert_eq!(plan["halt_cause"], "blink");
    let (_, alerts) = call(&app, "GET", "/api/v1/alerts?since=0", None).await;
    assert!(alerts.as_array().unwrap().iter().any(|a| a["kind"] == "control_blink"));
    let (_, later) = call(&app, "GET", "/api/v1/alerts?since=999999", None).await;
    assert_eq!(later, json!([]));
}

#[tokio::test]
async fn affect_override_reaches_gauge() {
    let st = state();
    let app = router(st.clone());
    let (code, _) = call(&app, "POST", "/api/v1/affect_override", Some(r#"{"metric": "stress", "value": 1.0}"#)).await;
    assert_eq!(code, StatusCode::OK);
    advance(&st, 600);
    let (_, a) = call(&app, "GET", "/api/v1/affective", None).await;
    assert!(a["stress"].as_f64().unwrap() > 0.5, "{a}");
}

#[tokio::test]
async fn raw_eeg_returns_requested_windows() {
    let st = state();
    let app = router(st.clone());
    advance(&st, 3000);
    let (code, v) = call(&app, "GET", "/api/v1/raw_eeg?window=4", None).await;
    assert_eq!(code, StatusCode::OK);
    let windows = v.as_array().unwrap();
    assert_eq!(windows.len(), 4);
    assert_eq!(windows[0]["samples"].as_array().unwrap().len(), 4);
}

#[tokio::test]
async fn repeated_gets_within_limit_skip_store() {
    let st = state();
    let app = router(st.clone());
    call(&app, "GET", "/api/v1/joints", None).await;
    let reads = st.cache().store().reads();
    for _ in 0..5 {
        call(&app, "GET", "/api/v1/joints", None).await;
    }
    assert_eq!(st.cache().store().reads(), reads);
    advance(&st, 550);
    call(&app, "GET", "/api/v1/joints", None).await;
    assert_eq!(st.cache().store().reads(), reads + 1);
}

#[tokio::test]
async fn stream_pushes_ndjson_snapshots() {
    let st = state();
    let app = router(st.clone());
    let req = Request::builder().uri("/api/v1/stream").body(Body::empty()).unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "application/x-ndjson");
    let mut body = resp.into_body();
    let frame = body.frame().await.unwrap().unwrap().into_data().unwrap();
    let topics: Vec<String> = std::str::from_utf8(&frame)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<StreamEvent>(l).unwrap().topic)
        .collect();
    for t in ["plan", "joints", "markers", "affective"] {
        assert!(topics.iter().any(|x| x == t), "{topics:?}");
    }
    st.close();
    while let Some(f) = body.frame().await {
        f.unwrap();
    }
}
