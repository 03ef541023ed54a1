//! HTTP service over an [`Engine`]: session submission and control, trial
//! views, exports, reruns and cluster status.
//!
//! Reads come from the store's replayed session state, so GET handlers
//! never touch the event logs. Mutations go through the engine behind one
//! mutex, which also serializes them against the background ticker.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as JsonValue};

use crate::engine::{Engine, EngineError};
use crate::events::{LineageEdge, ObservedTrial, SessionStatus};
use crate::ids::SessionId;
use crate::orchestrator::{top_k, TrialSummary};
use crate::space::{
    parse_condition, parse_config, parse_param, parse_termination, parse_tune, CheckpointStep,
    ChoptConfig, Condition, ConfigError, Parameters, Value,
};
use crate::store::{ExportFormat, SessionSummary, StoreError};

pub type SharedEngine = Arc<Mutex<Engine>>;

/// Error envelope returned by every failing endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub field: Option<String>,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, field: Option<String>, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                code: code.to_string(),
                field,
                message: message.into(),
            },
        }
    }

    fn validation(field: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", Some(field.to_string()), message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", None, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", None, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<ConfigError> for ApiError {
    fn from(e: ConfigError) -> Self {
        let field = e.field().map(str::to_string);
        let message = match &e {
            ConfigError::Invalid { message, .. } => message.clone(),
            ConfigError::Parse { .. } => e.to_string(),
        };
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", field, message)
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => ApiError::not_found(e.to_string()),
            StoreError::UnknownFormat(_) => ApiError::validation("format", e.to_string()),
            StoreError::Config(c) => c.into(),
            other => ApiError::internal(other.to_string()),
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(c) => c.into(),
            EngineError::Store(s) => s.into(),
            EngineError::NotFound(_) | EngineError::UnknownAgent(_) => ApiError::not_found(e.to_string()),
            other => ApiError::internal(other.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn lock(engine: &SharedEngine) -> ApiResult<MutexGuard<'_, Engine>> {
    engine
        .lock()
        .map_err(|_| ApiError::internal("engine state poisoned by an earlier panic"))
}

fn session_id(raw: &str) -> ApiResult<SessionId> {
    raw.parse()
        .map_err(|_| ApiError::not_found(format!("session {raw} not found")))
}

/// Body of `POST /sessions/{id}/rerun`. Every field is optional; an empty
/// request clones the base configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerunRequest {
    /// New initial sampling parameters per existing dimension, as in `h_params`.
    #[serde(default)]
    pub ranges: BTreeMap<String, JsonValue>,
    /// New dimensions, each written like an `h_params` entry.
    #[serde(default)]
    pub append: Map<String, JsonValue>,
    /// Activation conditions for appended dimensions.
    #[serde(default)]
    pub append_conditions: Vec<JsonValue>,
    /// Constants to set or replace.
    #[serde(default)]
    pub constants: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tune: Option<JsonValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub termination: Option<JsonValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Derive a new configuration from `base`: narrow ranges, set constants,
/// append dimensions, then apply the tuner and budget overrides. The result
/// is revalidated as a whole document.
pub fn apply_rerun(base: &ChoptConfig, req: &RerunRequest) -> Result<ChoptConfig, ConfigError> {
    let mut space = base.space.clone();

    let mut overrides = BTreeMap::new();
    for (name, raw) in &req.ranges {
        let field = format!("ranges.{name}");
        let spec = space
            .param(name)
            .ok_or_else(|| ConfigError::Invalid {
                field: field.clone(),
                message: "no such parameter".into(),
            })?;
        overrides.insert(name.clone(), Parameters::from_json(spec.distribution, raw, &field)?);
    }
    if !overrides.is_empty() {
        space = space.narrow(&overrides)?;
    }

    if !req.constants.is_empty() {
        let mut constants = space.constants().clone();
        constants.extend(req.constants.clone());
        space = space.with_constants(constants)?;
    }

    let mut conditions: Vec<(usize, Condition)> = req
        .append_conditions
        .iter()
        .enumerate()
        .map(|(i, raw)| parse_condition(raw, &format!("append_conditions[{i}]")).map(|c| (i, c)))
        .collect::<Result<_, _>>()?;
    if let Some((i, c)) = conditions.iter().find(|(_, c)| !req.append.contains_key(&c.child)) {
        return Err(ConfigError::Invalid {
            field: format!("append_conditions[{i}].child"),
            message: format!("`{}` is not an appended parameter", c.child),
        });
    }
    for (name, raw) in &req.append {
        let spec = parse_param(name, raw)?;
        let (mine, rest): (Vec<_>, Vec<_>) = conditions.into_iter().partition(|(_, c)| &c.child == name);
        conditions = rest;
        space = space.append_param(spec, mine.into_iter().map(|(_, c)| c).collect())?;
    }

    let mut config = base.clone();
    config.space = space;
    if let Some(raw) = &req.tune {
        config.tune = parse_tune(raw)?;
    }
    if let Some(step) = req.step {
        config.step = match step {
            -1 => CheckpointStep::Disabled,
            n if n >= 1 && n <= i64::from(u32::MAX) => CheckpointStep::Every(n as u32),
            _ => {
                return Err(ConfigError::Invalid {
                    field: "step".into(),
                    message: "must be -1 or a positive integer".into(),
                })
            }
        };
    }
    if let Some(raw) = &req.termination {
        config.termination = parse_termination(raw)?;
    }
    if let Some(p) = req.population {
        config.population = p;
    }
    if let Some(r) = req.stop_ratio {
        config.stop_ratio = r;
    }
    if let Some(seed) = req.seed {
        config.seed = Some(seed);
    }
    parse_config(config.to_pretty_string().as_bytes())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Created {
    pub id: SessionId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionView {
    pub summary: SessionSummary,
    pub config: JsonValue,
    pub pools: crate::events::SessionPools,
    pub best: Option<TrialSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialsView {
    pub session: SessionId,
    pub measure: String,
    pub trials: Vec<ObservedTrial>,
    pub lineage_edges: Vec<LineageEdge>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StopView {
    pub id: SessionId,
    pub previous: SessionStatus,
    pub status: SessionStatus,
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    status: Option<String>,
}

#[derive(Debug, Deserialize)]
struct TopQuery {
    k: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    format: Option<String>,
    sessions: Option<String>,
}

pub fn router(engine: SharedEngine) -> Router {
    Router::new()
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/trials", get(get_trials))
        .route("/sessions/{id}/top", get(get_top))
        .route("/sessions/{id}/export", get(export_session))
        .route("/sessions/{id}/rerun", post(rerun_session))
        .route("/sessions/{id}/stop", post(stop_session))
        .route("/export", get(export_many))
        .route("/cluster", get(get_cluster))
        .with_state(engine)
}

/// Advance the engine every `period` while it has work.
pub fn spawn_ticker(engine: SharedEngine, period: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(period);
        loop {
            interval.tick().await;
            let Ok(mut e) = engine.lock() else {
                log::error!("engine state poisoned; ticker stopping");
                return;
            };
            if e.busy() {
                if let Err(err) = e.tick() {
                    log::error!("tick failed: {err}");
                }
            }
        }
    })
}

async fn list_sessions(
    State(engine): State<SharedEngine>,
    Query(q): Query<ListQuery>,
) -> ApiResult<Json<Vec<SessionSummary>>> {
    let status = q
        .status
        .as_deref()
        .map(str::parse::<SessionStatus>)
        .transpose()
        .map_err(|m| ApiError::validation("status", m))?;
    let e = lock(&engine)?;
    let mut list = e.store().list(status);
    list.sort_by_key(|s| (s.created_at, s.id));
    Ok(Json(list))
}

async fn create_session(State(engine): State<SharedEngine>, body: Bytes) -> ApiResult<(StatusCode, Json<Created>)> {
    let config = parse_config(&body)?;
    let id = lock(&engine)?.submit(config, None)?;
    Ok((StatusCode::CREATED, Json(Created { id })))
}

async fn get_session(State(engine): State<SharedEngine>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let id = session_id(&id)?;
    let e = lock(&engine)?;
    let rec = e.store().load_session(id)?;
    let snap = rec.snapshot();
    Ok(Json(SessionView {
        summary: rec.summary(),
        config: rec.config.to_json(),
        pools: snap.pools,
        best: snap.best,
    }))
}

async fn get_trials(State(engine): State<SharedEngine>, Path(id): Path<String>) -> ApiResult<Json<TrialsView>> {
    let id = session_id(&id)?;
    let e = lock(&engine)?;
    let rec = e.store().load_session(id)?;
    Ok(Json(TrialsView {
        session: id,
        measure: rec.config.measure.clone(),
        trials: rec.state.trials.values().cloned().collect(),
        lineage_edges: rec.state.lineage.clone(),
    }))
}

async fn get_top(
    State(engine): State<SharedEngine>,
    Path(id): Path<String>,
    Query(q): Query<TopQuery>,
) -> ApiResult<Json<Vec<TrialSummary>>> {
    let id = session_id(&id)?;
    let e = lock(&engine)?;
    let rec = e.store().load_session(id)?;
    let snap = rec.snapshot();
    Ok(Json(top_k(&snap.trials, snap.order, q.k.unwrap_or(10))))
}

fn export_response(bytes: Vec<u8>, format: ExportFormat) -> Response {
    let content_type = match format {
        ExportFormat::Csv => "text/csv; charset=utf-8",
        ExportFormat::Jsonl => "application/x-ndjson",
    };
    ([(header::CONTENT_TYPE, content_type)], bytes).into_response()
}

fn export_format(raw: Option<&str>) -> ApiResult<ExportFormat> {
    Ok(raw.unwrap_or("csv").parse::<ExportFormat>()?)
}

async fn export_session(
    State(engine): State<SharedEngine>,
    Path(id): Path<String>,
    Query(q): Query<ExportQuery>,
) -> ApiResult<Response> {
    let id = session_id(&id)?;
    let format = export_format(q.format.as_deref())?;
    let bytes = lock(&engine)?.store().export_trials(&[id], format)?;
    Ok(export_response(bytes, format))
}

async fn export_many(State(engine): State<SharedEngine>, Query(q): Query<ExportQuery>) -> ApiResult<Response> {
    let format = export_format(q.format.as_deref())?;
    let raw = q
        .sessions
        .ok_or_else(|| ApiError::validation("sessions", "list session ids separated by commas"))?;
    let ids = raw
        .split(',')
        .filter(|s| !s.is_empty())
        .map(session_id)
        .collect::<ApiResult<Vec<_>>>()?;
    if ids.is_empty() {
        return Err(ApiError::validation("sessions", "at least one session id is required"));
    }
    let bytes = lock(&engine)?.store().export_trials(&ids, format)?;
    Ok(export_response(bytes, format))
}

async fn rerun_session(
    State(engine): State<SharedEngine>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Created>)> {
    let id = session_id(&id)?;
    let req: RerunRequest = if body.iter().all(u8::is_ascii_whitespace) {
        RerunRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::validation("rerun", e.to_string()))?
    };
    let mut e = lock(&engine)?;
    let base = e.store().load_session(id)?.config.clone();
    let config = apply_rerun(&base, &req)?;
    let new_id = e.submit(config, Some(id))?;
    Ok((StatusCode::CREATED, Json(Created { id: new_id })))
}

async fn stop_session(State(engine): State<SharedEngine>, Path(id): Path<String>) -> ApiResult<Json<StopView>> {
    let id = session_id(&id)?;
    let mut e = lock(&engine)?;
    let previous = e.stop(id)?;
    let status = e.store().load_session(id)?.state.status;
    Ok(Json(StopView { id, previous, status }))
}

async fn get_cluster(State(engine): State<SharedEngine>) -> ApiResult<Json<JsonValue>> {
    let e = lock(&engine)?;
    let cluster = e.cluster();
    Ok(Json(json!({
        "now": e.now(),
        "capacity": cluster.capacity,
        "headroom": cluster.headroom,
        "chopt_total": cluster.chopt_total(),
        "non_chopt_used": cluster.non_chopt_used,
        "utilization": e.utilization(),
        "grants": cluster.grants,
        "master": e.registry().master,
        "agents": e.registry().agents,
        "queue": e.queue().collect::<Vec<_>>(),
        "last_tick": e.stats().last(),
    })))
}
