//! Operator HTTP surface for the console.
//!
//! Every response body is a JSON object carrying `schema_version`. Errors use
//! `{ "error": <code>, "message": <text> }`. Decisions are queued for the
//! controller and answered once it has consumed them at a cycle boundary.

use std::collections::HashMap;
use std::future::Future;
use std::str::FromStr;
use std::sync::mpsc::Sender;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::RwLock;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tower_http::cors::CorsLayer;

use crate::config::Config;
use crate::controller::{Command, CommandError, ControllerHandle, Snapshot};
use crate::executor::{ApprovalStatus, Decision};
use crate::knowledge::{EntryKind, JournalEntry, JournalReader, QueryFilter};

pub const SCHEMA_VERSION: u32 = 1;
pub const MAX_PAGE: usize = 1000;
pub const DEFAULT_PAGE: usize = 100;

#[derive(Clone)]
enum Mode {
    Live { commands: Sender<Command>, snapshot: Arc<RwLock<Snapshot>> },
    ReadOnly { snapshot: Arc<Snapshot> },
}

/// Shared state behind every handler.
#[derive(Clone)]
pub struct GatewayState {
    mode: Mode,
    journal: JournalReader,
    config: Arc<Value>,
    decision_timeout: Duration,
}

impl GatewayState {
    /// Serves a running controller.
    pub fn live(handle: ControllerHandle, config: &Config) -> Self {
        GatewayState {
            mode: Mode::Live { commands: handle.commands, snapshot: handle.snapshot },
            journal: handle.journal,
            config: Arc::new(serde_json::to_value(config).expect("config serializes")),
            decision_timeout: Duration::from_millis(config.gateway.decision_timeout_ms),
        }
    }

    /// Serves a finished journal; all writes answer `503 read_only`.
    pub fn read_only(entries: Vec<JournalEntry>, digest: String, config: Option<&Config>) -> Self {
        let snapshot = Snapshot::from_journal(&entries, digest);
        let config = config.cloned().unwrap_or_default();
        GatewayState {
            mode: Mode::ReadOnly { snapshot: Arc::new(snapshot) },
            journal: JournalReader::from_entries(entries),
            config: Arc::new(serde_json::to_value(&config).expect("config serializes")),
            decision_timeout: Duration::from_millis(config.gateway.decision_timeout_ms),
        }
    }

    fn snapshot(&self) -> Snapshot {
        match &self.mode {
            Mode::Live { snapshot, .. } => snapshot.read().clone(),
            Mode::ReadOnly { snapshot } => (**snapshot).clone(),
        }
    }

    fn commands(&self) -> Result<&Sender<Command>, ApiError> {
        match &self.mode {
            Mode::Live { commands, snapshot } => {
                if snapshot.read().halted {
                    Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "halted", "the control loop halted after a journal failure"))
                } else {
                    Ok(commands)
                }
            }
            Mode::ReadOnly { .. } => {
                Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "read_only", "serving a journal without a running loop"))
            }
        }
    }
}

/// A structured error response.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<CommandError> for ApiError {
    fn from(e: CommandError) -> Self {
        match e {
            CommandError::NotFound(m) => ApiError::new(StatusCode::NOT_FOUND, "not_found", m),
            CommandError::Conflict(m) => ApiError::new(StatusCode::CONFLICT, "conflict", m),
            CommandError::BadRequest(m) => ApiError::bad_request(m),
            CommandError::Halted(m) => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "halted", m),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"schema_version": SCHEMA_VERSION, "error": self.code, "message": self.message}))).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn document(mut body: Value) -> Json<Value> {
    body["schema_version"] = json!(SCHEMA_VERSION);
    Json(body)
}

fn param<T: FromStr>(params: &HashMap<String, String>, name: &str) -> Result<Option<T>, ApiError> {
    params
        .get(name)
        .map(|raw| raw.parse::<T>().map_err(|_| ApiError::bad_request(format!("invalid value `{raw}` for `{name}`"))))
        .transpose()
}

fn entry_document(e: &JournalEntry) -> Value {
    let mut v = e.payload.clone();
    if v.is_object() {
        v["seq"] = json!(e.seq);
        v["cycle"] = json!(e.cycle);
        v["tick"] = json!(e.tick);
    }
    v
}

async fn get_state(State(st): State<GatewayState>) -> ApiResult {
    let snap = st.snapshot();
    let pending = snap.approvals.iter().filter(|a| a.status == ApprovalStatus::Pending).count();
    Ok(document(json!({
        "tick": snap.tick,
        "cycles": snap.cycles,
        "live": snap.live,
        "halted": snap.halted,
        "services": snap.services,
        "frozen_services": snap.frozen_services,
        "pending_approvals": pending,
        "journal_entries": snap.journal_entries,
        "digest": snap.digest,
    })))
}

async fn get_anomalies(State(st): State<GatewayState>, Query(params): Query<HashMap<String, String>>) -> ApiResult {
    let from: u64 = param(&params, "cycle_from")?.unwrap_or(0);
    let filter = QueryFilter { kind: Some(EntryKind::Anomaly), cycles: Some(from..=u64::MAX), signature: None };
    let anomalies: Vec<Value> = st.journal.query(&filter).iter().map(entry_document).collect();
    Ok(document(json!({ "anomalies": anomalies })))
}

async fn get_approvals(State(st): State<GatewayState>, Query(params): Query<HashMap<String, String>>) -> ApiResult {
    let status = match params.get("status") {
        None => None,
        Some(raw) => Some(
            serde_json::from_value::<ApprovalStatus>(json!(raw))
                .map_err(|_| ApiError::bad_request(format!("unknown approval status `{raw}`")))?,
        ),
    };
    let approvals: Vec<_> = st.snapshot().approvals.into_iter().filter(|a| status.is_none_or(|s| a.status == s)).collect();
    Ok(document(json!({ "approvals": approvals })))
}

#[derive(Deserialize)]
struct DecisionBody {
    decision: Decision,
    decider: String,
}

#[derive(Deserialize)]
struct AckBody {
    by: String,
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

async fn await_reply<T>(st: &GatewayState, rx: oneshot::Receiver<Result<T, CommandError>>) -> Result<T, ApiError> {
    match tokio::time::timeout(st.decision_timeout, rx).await {
        Ok(Ok(r)) => r.map_err(ApiError::from),
        Ok(Err(_)) => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "unavailable", "the control loop has stopped")),
        Err(_) => Err(ApiError::new(StatusCode::GATEWAY_TIMEOUT, "timeout", "the control loop did not consume the command in time")),
    }
}

async fn post_approval(State(st): State<GatewayState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let body: DecisionBody = parse_body(&body)?;
    if body.decider.trim().is_empty() {
        return Err(ApiError::bad_request("decider must be a non-empty identifier"));
    }
    let commands = st.commands()?;
    let (tx, rx) = oneshot::channel();
    commands
        .send(Command::Resolve { request_id: id, decision: body.decision, decider: body.decider, reply: tx })
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "unavailable", "the control loop has stopped"))?;
    let result = await_reply(&st, rx).await?;
    Ok(document(json!({ "result": result })))
}

async fn get_escalations(State(st): State<GatewayState>) -> ApiResult {
    Ok(document(json!({ "escalations": st.snapshot().escalations })))
}

async fn post_ack(State(st): State<GatewayState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let body: AckBody = parse_body(&body)?;
    if body.by.trim().is_empty() {
        return Err(ApiError::bad_request("`by` must be a non-empty identifier"));
    }
    let commands = st.commands()?;
    let (tx, rx) = oneshot::channel();
    commands
        .send(Command::Acknowledge { escalation_id: id.clone(), by: body.by, reply: tx })
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "unavailable", "the control loop has stopped"))?;
    await_reply(&st, rx).await?;
    Ok(document(json!({ "acknowledged": id })))
}

async fn get_journal(State(st): State<GatewayState>, Query(params): Query<HashMap<String, String>>) -> ApiResult {
    let from: u64 = param(&params, "from_seq")?.unwrap_or(0);
    let limit: usize = param(&params, "limit")?.unwrap_or(DEFAULT_PAGE);
    if limit == 0 || limit > MAX_PAGE {
        return Err(ApiError::bad_request(format!("limit must be within 1..={MAX_PAGE}")));
    }
    let entries = st.journal.page(from, limit);
    let next = entries.last().map(|e| e.seq + 1).filter(|n| (*n as usize) < st.journal.len());
    Ok(document(json!({ "entries": entries, "next_seq": next })))
}

async fn get_config(State(st): State<GatewayState>) -> ApiResult {
    Ok(document(json!({ "config": *st.config })))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: GatewayState) -> Router {
    Router::new()
        .route("/api/state", get(get_state))
        .route("/api/anomalies", get(get_anomalies))
        .route("/api/approvals", get(get_approvals))
        .route("/api/approvals/{id}", post(post_approval))
        .route("/api/escalations", get(get_escalations))
        .route("/api/escalations/{id}/ack", post(post_ack))
        .route("/api/journal", get(get_journal))
        .route("/api/config", get(get_config))
        .fallback(not_found)
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Binds `addr` and serves until `shutdown` resolves.
pub async fn serve(addr: &str, state: GatewayState, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("gateway listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
