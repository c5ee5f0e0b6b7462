//! HTTP/JSON gateway over a live simulation. GETs are served through the
//! read-through cache; POSTs become operator inputs; a background task
//! steps the simulation in real time.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bytes::Bytes;
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use cowork_core::gateway::wire::{BlockRequest, ControlRequest, ErrorBody, OverrideRequest, StreamEvent, API_PREFIX};
use cowork_core::gateway::{alerts_since, keys, latest_windows, GatewayError, ReadThroughCache, DEFAULT_STALENESS_MS};
use cowork_core::scenario::Input;
use cowork_core::system::{InputOutcome, SimError, Simulation};

pub const STREAM_INTERVAL_MS: u64 = 250;
pub const DEFAULT_EEG_WINDOWS: usize = 1;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub staleness_ms: u64,
    /// Per-key overrides of the staleness limit.
    pub key_limits: BTreeMap<String, u64>,
    pub stream_interval_ms: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            staleness_ms: DEFAULT_STALENESS_MS,
            key_limits: BTreeMap::new(),
            stream_interval_ms: STREAM_INTERVAL_MS,
        }
    }
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind: {0}")]
    Bind(std::io::Error),
    #[error("server: {0}")]
    Serve(std::io::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
}

struct Shared {
    sim: Mutex<Simulation>,
    cache: ReadThroughCache,
    stream_interval: Duration,
    closing: watch::Sender<bool>,
}

/// Handle shared by the handlers and the ticker.
#[derive(Clone)]
pub struct AppState {
    shared: Arc<Shared>,
}

impl std::fmt::Debug for AppState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AppState").finish_non_exhaustive()
    }
}

impl AppState {
    pub fn new(sim: Simulation, cfg: &ServerConfig) -> Self {
        let mut cache = ReadThroughCache::new(sim.store().clone(), cfg.staleness_ms);
        for (k, ms) in &cfg.key_limits {
            cache = cache.with_limit(k, *ms);
        }
        let (closing, _) = watch::channel(false);
        AppState {
            shared: Arc::new(Shared {
                sim: Mutex::new(sim),
                cache,
                stream_interval: Duration::from_millis(cfg.stream_interval_ms.max(1)),
                closing,
            }),
        }
    }

    /// Runs `f` with the simulation locked. Never held across an await.
    pub fn with_sim<R>(&self, f: impl FnOnce(&mut Simulation) -> R) -> R {
        f(&mut self.shared.sim.lock())
    }

    pub fn cache(&self) -> &ReadThroughCache {
        &self.shared.cache
    }

    /// Ends open push streams and stops the ticker.
    pub fn close(&self) {
        self.shared.closing.send_replace(true);
    }

    fn closing(&self) -> watch::Receiver<bool> {
        self.shared.closing.subscribe()
    }
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest(String),
    Conflict(String),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (code, msg) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, m),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        (code, Json(ErrorBody { error: msg })).into_response()
    }
}

impl From<SimError> for ApiError {
    fn from(e: SimError) -> Self {
        match e {
            // wrong state, grasped block, or no plan left
            SimError::Executor(e) => ApiError::Conflict(e.to_string()),
            SimError::Scenario(e) => ApiError::BadRequest(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::NotFound(_) => ApiError::NotFound(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed body: {e}")))
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/plan", get(plan))
        .route("/joints", get(joints))
        .route("/markers", get(markers))
        .route("/affective", get(affective))
        .route("/rewards", get(rewards))
        .route("/alerts", get(alerts))
        .route("/raw_eeg", get(raw_eeg))
        .route("/stream", get(stream))
        .route("/control", post(control))
        .route("/claim", post(claim))
        .route("/release", post(release))
        .route("/affect_override", post(affect_override))
        .route("/blink", post(blink));
    Router::new()
        .nest(API_PREFIX, api)
        .fallback(|| async { ApiError::NotFound("no such route".into()) })
        .with_state(state)
}

fn cached(st: &AppState, key: &str) -> ApiResult<Json<Value>> {
    Ok(Json(st.cache().get(key)?))
}

/// Like `cached`, but a key nobody has written yet reads as an empty list.
fn cached_list(st: &AppState, key: &str) -> ApiResult<Value> {
    match st.cache().get(key) {
        Ok(v) => Ok(v),
        Err(GatewayError::NotFound(_)) => Ok(Value::Array(Vec::new())),
        Err(e) => Err(e.into()),
    }
}

async fn plan(State(st): State<AppState>) -> ApiResult<Json<Value>> {
    cached(&st, keys::PLAN)
}

async fn joints(State(st): State<AppState>) -> ApiResult<Json<Value>> {
    cached(&st, keys::JOINTS)
}

async fn markers(State(st): State<AppState>) -> ApiResult<Json<Value>> {
    cached(&st, keys::MARKERS)
}

async fn affective(State(st): State<AppState>) -> ApiResult<Json<Value>> {
    cached(&st, keys::AFFECTIVE)
}

async fn rewards(State(st): State<AppState>) -> ApiResult<Json<Value>> {
    Ok(Json(cached_list(&st, keys::REWARDS)?))
}

#[derive(Debug, Deserialize)]
struct AlertsQuery {
    since: Option<u64>,
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> ApiResult<T> {
    q.map(|Query(v)| v).map_err(|e| ApiError::BadRequest(e.body_text()))
}

async fn alerts(State(st): State<AppState>, q: Result<Query<AlertsQuery>, QueryRejection>) -> ApiResult<Json<Value>> {
    let q = query(q)?;
    let all = cached_list(&st, keys::ALERTS)?;
    Ok(Json(json!(alerts_since(&all, q.since.unwrap_or(0)))))
}

#[derive(Debug, Deserialize)]
struct EegQuery {
    window: Option<usize>,
}

async fn raw_eeg(State(st): State<AppState>, q: Result<Query<EegQuery>, QueryRejection>) -> ApiResult<Json<Value>> {
    let q = query(q)?;
    let all = cached_list(&st, keys::RAW_EEG)?;
    Ok(Json(json!(latest_windows(&all, q.window.unwrap_or(DEFAULT_EEG_WINDOWS)))))
}

fn apply(st: &AppState, input: Input) -> ApiResult<Json<InputOutcome>> {
    Ok(Json(st.with_sim(|sim| sim.apply_input(input))?))
}

async fn control(State(st): State<AppState>, body: Bytes) -> ApiResult<Json<InputOutcome>> {
    let req: ControlRequest = parse_body(&body)?;
    apply(&st, Input::Control { command: req.command })
}

async fn claim(State(st): State<AppState>, body: Bytes) -> ApiResult<Json<InputOutcome>> {
    let req: BlockRequest = parse_body(&body)?;
    apply(&st, Input::Claim { block: req.block })
}

async fn release(State(st): State<AppState>, body: Bytes) -> ApiResult<Json<InputOutcome>> {
    let req: BlockRequest = parse_body(&body)?;
    apply(&st, Input::Release { block: req.block })
}

async fn affect_override(State(st): State<AppState>, body: Bytes) -> ApiResult<Json<InputOutcome>> {
    let req: OverrideRequest = parse_body(&body)?;
    if !(0.0..=1.0).contains(&req.value) {
        return Err(ApiError::BadRequest("value must lie in [0, 1]".into()));
    }
    apply(&st, Input::AffectOverride { metric: req.metric, value: req.value })
}

async fn blink(State(st): State<AppState>) -> ApiResult<Json<InputOutcome>> {
    apply(&st, Input::Blink)
}

/// Keys pushed on every stream tick. Alerts are pushed only when new ones
/// arrived, EEG as the newest window.
const STREAM_KEYS: [&str; 4] = [keys::PLAN, keys::JOINTS, keys::MARKERS, keys::AFFECTIVE];

struct StreamCursor {
    st: AppState,
    ticker: tokio::time::Interval,
    closing: watch::Receiver<bool>,
    alerts_seen: usize,
}

impl StreamCursor {
    fn batch(&mut self) -> Bytes {
        let limit = self.st.shared.stream_interval.as_millis() as u64;
        let now = self.st.with_sim(|s| s.now_ms());
        let mut out = Vec::new();
        let mut line = |topic: &str, data: Value| {
            let ev = StreamEvent { topic: topic.to_string(), timestamp_ms: now, data };
            serde_json::to_writer(&mut out, &ev).expect("serializable");
            out.push(b'\n');
        };
        for key in STREAM_KEYS {
            if let Ok(v) = self.st.cache().cached_get(key, limit) {
                line(key, v);
            }
        }
        if let Ok(Value::Array(all)) = self.st.cache().cached_get(keys::ALERTS, limit) {
            // the stored list is bounded, so a shrinking length means it rolled
            let fresh = if all.len() >= self.alerts_seen { &all[self.alerts_seen..] } else { &all[..] };
            if !fresh.is_empty() {
                line(keys::ALERTS, Value::Array(fresh.to_vec()));
            }
            self.alerts_seen = all.len();
        }
        if let Ok(v) = self.st.cache().cached_get(keys::RAW_EEG, limit) {
            if let Some(w) = latest_windows(&v, 1).pop() {
                line(keys::RAW_EEG, json!(w));
            }
        }
        Bytes::from(out)
    }
}

async fn stream(State(st): State<AppState>) -> Response {
    let mut ticker = tokio::time::interval(st.shared.stream_interval);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let cursor = StreamCursor { closing: st.closing(), st, ticker, alerts_seen: 0 };
    let body = futures::stream::unfold(cursor, |mut c| async move {
        if *c.closing.borrow() {
            return None;
        }
        tokio::select! {
            _ = c.ticker.tick() => {}
            _ = c.closing.changed() => return None,
        }
        let chunk = c.batch();
        Some((Ok::<_, Infallible>(chunk), c))
    });
    ([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from_stream(body)).into_response()
}

/// Steps the simulation once per tick of wall time until the state is closed.
pub fn spawn_ticker(state: AppState) -> JoinHandle<Result<(), SimError>> {
    let tick = Duration::from_millis(state.with_sim(|s| s.tick_ms()));
    let mut closing = state.closing();
    tokio::spawn(async move {
        let mut ticker = tokio::time::interval(tick);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                _ = ticker.tick() => state.with_sim(|s| s.step())?,
                _ = closing.changed() => return Ok(()),
            }
        }
    })
}

pub async fn bind(port: u16) -> Result<TcpListener, ServerError> {
    TcpListener::bind(("127.0.0.1", port)).await.map_err(ServerError::Bind)
}

/// Serves until `shutdown` resolves, then stops the ticker and flushes the
/// event log.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServerError> {
    let ticker = spawn_ticker(state.clone());
    let closer = state.clone();
    let app = router(state.clone());
    let served = axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            shutdown.await;
            closer.close();
        })
        .await;
    state.close();
    let ticked = ticker.await.unwrap_or(Ok(()));
    state.with_sim(|s| s.shutdown())?;
    served.map_err(ServerError::Serve)?;
    ticked?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use cowork_core::executor::{ExecState, ExecutorError};

    #[test]
    fn sim_errors_map_to_status_codes() {
        let conflict = ApiError::from(SimError::Executor(ExecutorError::InvalidTransition {
            op: "resume",
            state: ExecState::Running,
        }));
        assert!(matches!(conflict, ApiError::Conflict(_)));
        let grasped = ApiError::from(SimError::Executor(ExecutorError::Grasped(cowork_core::world::Block::Green)));
        assert!(matches!(grasped, ApiError::Conflict(_)));
    }

    #[test]
    fn missing_key_is_not_found() {
        let e = ApiError::from(GatewayError::NotFound("plan".into()));
        assert_eq!(e.into_response().status(), StatusCode::NOT_FOUND);
    }

    #[test]
    fn malformed_body_is_bad_request() {
        let r: ApiResult<ControlRequest> = parse_body(&Bytes::from_static(b"{\"command\": \"jump\"}"));
        assert!(matches!(r, Err(ApiError::BadRequest(_))));
        let r: ApiResult<BlockRequest> = parse_body(&Bytes::from_static(b"{\"block\": \"green\"}"));
        assert!(r.is_ok());
    }
}
