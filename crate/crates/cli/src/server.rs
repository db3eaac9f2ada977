//! HTTP API and the server-sent event stream.

use std::collections::{HashMap, VecDeque};
use std::convert::Infallible;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use codemem::metrics::{CostMode, MetricsError};
use codemem::orchestrator::driver::Driver;
use codemem::orchestrator::{Event, OrchestratorError};
use codemem::skillbank::{SkillDraft, SkillError};
use codemem::todos::{TodoError, TodoItem};
use codemem::toolhost::Scenario;
use futures::Stream;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::broadcast;

use crate::app::{parse_skill_ref, App};

/// Every route the server answers, as `(method, path)`. The console may use
/// nothing else.
pub const ENDPOINTS: &[(&str, &str)] = &[
    ("GET", "/healthz"),
    ("GET", "/registry/search"),
    ("POST", "/registry/manifests"),
    ("GET", "/skills"),
    ("POST", "/skills"),
    ("GET", "/skills/{name}"),
    ("POST", "/skills/{name}/run"),
    ("GET", "/sessions"),
    ("POST", "/sessions"),
    ("GET", "/sessions/{id}"),
    ("POST", "/sessions/{id}/messages"),
    ("GET", "/sessions/{id}/events"),
    ("GET", "/sessions/{id}/todos"),
    ("PUT", "/sessions/{id}/todos"),
    ("PUT", "/sessions/{id}/fixture"),
    ("GET", "/sessions/{id}/fixture/drive"),
    ("GET", "/sessions/{id}/metrics"),
];

type SharedDriver = Arc<Mutex<Box<dyn Driver>>>;

pub struct AppState {
    pub app: App,
    token: String,
    events: broadcast::Sender<(String, Event)>,
    drivers: Mutex<HashMap<String, SharedDriver>>,
    manifests: Mutex<()>,
}

impl AppState {
    pub fn new(app: App, token: String) -> Arc<Self> {
        let (events, _) = broadcast::channel(1024);
        let sender = events.clone();
        app.runtime.add_sink(Arc::new(move |session_id: &str, event: &Event| {
            // no subscribers is fine
            let _ = sender.send((session_id.to_string(), event.clone()));
        }));
        Arc::new(Self {
            app,
            token,
            events,
            drivers: Mutex::new(HashMap::new()),
            manifests: Mutex::new(()),
        })
    }

    /// The session's driver, replaced when the request names one.
    fn session_driver(&self, session_id: &str, spec: Option<&str>) -> Result<SharedDriver, ApiError> {
        let mut drivers = self.drivers.lock().expect("driver map poisoned");
        if let Some(spec) = spec {
            let driver = self.app.driver(spec, None).map_err(ApiError::bad_request)?;
            let shared = Arc::new(Mutex::new(driver));
            drivers.insert(session_id.to_string(), shared.clone());
            return Ok(shared);
        }
        if let Some(existing) = drivers.get(session_id) {
            return Ok(existing.clone());
        }
        let driver = self.app.default_driver().ok_or_else(|| {
            ApiError::new(
                StatusCode::BAD_REQUEST,
                "no_driver",
                "no driver configured; pass `driver` in the message body",
            )
        })?;
        let shared = Arc::new(Mutex::new(driver));
        drivers.insert(session_id.to_string(), shared.clone());
        Ok(shared)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/registry/search", get(registry_search))
        .route("/registry/manifests", post(registry_import))
        .route("/skills", get(list_skills).post(register_skill))
        .route("/skills/{name}", get(show_skill))
        .route("/skills/{name}/run", post(run_skill))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(session_info))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/events", get(session_events))
        .route("/sessions/{id}/todos", get(get_todos).put(put_todos))
        .route("/sessions/{id}/fixture", axum::routing::put(put_fixture))
        .route("/sessions/{id}/fixture/drive", get(fixture_drive))
        .route("/sessions/{id}/metrics", get(session_metrics))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/healthz", get(healthz))
        .merge(api)
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
        }
    }

    fn bad_request(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", format!("{e:#}"))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"kind": self.kind, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        use OrchestratorError as E;
        let (status, kind) = match &e {
            E::UnknownSession(_) | E::Todo(TodoError::UnknownSession(_)) => (StatusCode::NOT_FOUND, "unknown_session"),
            E::SessionNotActive { .. } => (StatusCode::CONFLICT, "session_not_active"),
            E::Driver(_) => (StatusCode::BAD_GATEWAY, "driver"),
            E::StepLimitExceeded(_) | E::TokenBudgetExceeded { .. } => (StatusCode::CONFLICT, "limit_exceeded"),
            E::Skill(SkillError::UnknownSkill(_) | SkillError::UnknownVersion { .. }) => {
                (StatusCode::NOT_FOUND, "unknown_skill")
            }
            E::Skill(SkillError::Io(_) | SkillError::Corrupt(..)) => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
            E::Skill(_) => (StatusCode::UNPROCESSABLE_ENTITY, "skill_rejected"),
            E::Todo(TodoError::Io(_)) => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
            E::Todo(_) => (StatusCode::UNPROCESSABLE_ENTITY, "todo_rejected"),
            E::Registry(_) => (StatusCode::BAD_REQUEST, "registry"),
            E::Tool(_) => (StatusCode::BAD_REQUEST, "tool"),
            E::InvalidArguments(_) => (StatusCode::BAD_REQUEST, "invalid_arguments"),
            E::Sandbox(_) => (StatusCode::INTERNAL_SERVER_ERROR, "sandbox"),
            E::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
        };
        Self::new(status, kind, e.to_string())
    }
}

impl From<SkillError> for ApiError {
    fn from(e: SkillError) -> Self {
        OrchestratorError::from(e).into()
    }
}

impl From<MetricsError> for ApiError {
    fn from(e: MetricsError) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "empty_trajectory", e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let body: &[u8] = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_body", e.to_string()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

/// Accepts `Authorization: Bearer <token>`, or `?access_token=` for
/// clients such as `EventSource` that cannot set headers.
async fn require_token(State(state): State<Arc<AppState>>, request: Request, next: Next) -> Response {
    let header = request
        .headers()
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    let query = request.uri().query().and_then(|q| {
        q.split('&')
            .find_map(|pair| pair.strip_prefix("access_token="))
    });
    let presented = header.or(query).unwrap_or("");
    if constant_time_eq(presented.as_bytes(), state.token.as_bytes()) {
        next.run(request).await
    } else {
        ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong API token").into_response()
    }
}

async fn healthz() -> Json<Value> {
    Json(json!({"status": "ok", "version": env!("CARGO_PKG_VERSION")}))
}

#[derive(Deserialize)]
struct SearchQuery {
    q: String,
    k: Option<usize>,
}

async fn registry_search(State(state): State<Arc<AppState>>, Query(query): Query<SearchQuery>) -> ApiResult<Json<Value>> {
    let k = query.k.unwrap_or(codemem::registry::DEFAULT_SEARCH_K);
    let hits = state
        .app
        .runtime
        .registry()
        .search(&query.q, k)
        .map_err(OrchestratorError::from)?;
    Ok(Json(json!(hits)))
}

async fn registry_import(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let text = std::str::from_utf8(&body).map_err(ApiError::bad_request)?;
    let _guard = state.manifests.lock().expect("manifest lock poisoned");
    let imported = state.app.import_manifest(text, "api").map_err(|e| {
        ApiError::new(StatusCode::BAD_REQUEST, "registry", format!("{e:#}"))
    })?;
    Ok((
        StatusCode::CREATED,
        Json(json!({"imported": imported, "total": state.app.runtime.registry().len()})),
    ))
}

async fn list_skills(State(state): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let bank = state.app.runtime.skills();
    let mut out = Vec::new();
    for latest in bank.list() {
        let versions: Vec<u32> = bank.versions(&latest.name)?.iter().map(|s| s.version).collect();
        out.push(json!({
            "name": latest.name,
            "latest_version": latest.version,
            "versions": versions,
            "description": latest.description,
            "signature": latest.signature,
            "required_tools": latest.required_tools,
            "content_hash": latest.content_hash,
            "deprecated": latest.deprecated,
        }));
    }
    out.sort_by(|a, b| a["name"].as_str().cmp(&b["name"].as_str()));
    Ok(Json(Value::Array(out)))
}

async fn show_skill(State(state): State<Arc<AppState>>, Path(name): Path<String>) -> ApiResult<Json<Value>> {
    let (name, version) = parse_skill_ref(&name).map_err(ApiError::bad_request)?;
    let bank = state.app.runtime.skills();
    match version {
        Some(v) => Ok(Json(json!(*bank.get(&name, Some(v))?))),
        None => {
            let versions: Vec<Value> = bank.versions(&name)?.iter().map(|s| json!(**s)).collect();
            Ok(Json(json!({"name": name, "versions": versions})))
        }
    }
}

#[derive(Deserialize)]
struct RegisterBody {
    session_id: String,
    execution_id: String,
    #[serde(default)]
    user_confirmed: bool,
    #[serde(flatten)]
    draft: SkillDraft,
}

async fn register_skill(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let body: RegisterBody = parse_body(&body)?;
    let skill = blocking(move || {
        state
            .app
            .runtime
            .register_skill(&body.session_id, body.draft, &body.execution_id, body.user_confirmed)
    })
    .await??;
    Ok((StatusCode::CREATED, Json(json!(*skill))))
}

#[derive(Deserialize)]
struct RunSkillBody {
    #[serde(default = "empty_object")]
    args: Value,
    #[serde(default)]
    version: Option<u32>,
    #[serde(default)]
    session_id: Option<String>,
    #[serde(default)]
    fixture: Option<String>,
}

fn empty_object() -> Value {
    json!({})
}

async fn run_skill(State(state): State<Arc<AppState>>, Path(name): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let body: RunSkillBody = parse_body(&body)?;
    let (name, at) = parse_skill_ref(&name).map_err(ApiError::bad_request)?;
    let version = body.version.or(at);
    let runtime = state.app.runtime.clone();
    let session_id = match body.session_id {
        Some(id) => {
            runtime.session_info(&id)?;
            id
        }
        None => {
            let scenario = state
                .app
                .session_scenario(body.fixture.as_deref())
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "unknown_fixture", format!("{e:#}")))?;
            runtime.create_session(scenario)?
        }
    };
    let id = session_id.clone();
    let args = body.args;
    let result = blocking(move || runtime.run_skill(&id, &name, version, &args)).await??;
    let drive: Vec<Value> = state
        .app
        .runtime
        .drive(&session_id)
        .unwrap_or_default()
        .iter()
        .map(|(path, bytes)| json!({"path": path, "size": bytes.len()}))
        .collect();
    Ok(Json(json!({
        "session_id": session_id,
        "visible": result.visible_text(),
        "result": result,
        "drive": drive,
    })))
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let runtime = &state.app.runtime;
    let infos: Vec<Value> = runtime
        .session_ids()
        .iter()
        .filter_map(|id| runtime.session_info(id).ok())
        .map(|info| json!(info))
        .collect();
    Ok(Json(Value::Array(infos)))
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let body: Value = parse_body(&body)?;
    // an absent `fixture` means the configured default, `null` means none
    let scenario = if let Some(inline) = body.get("scenario") {
        Some(parse_scenario(inline)?)
    } else {
        match body.get("fixture") {
            Some(Value::Null) => None,
            Some(Value::String(name)) => Some(
                state
                    .app
                    .scenario(name)
                    .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "unknown_fixture", format!("{e:#}")))?,
            ),
            Some(_) => return Err(ApiError::bad_request("`fixture` must be a string or null")),
            None => state
                .app
                .session_scenario(None)
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "unknown_fixture", format!("{e:#}")))?,
        }
    };
    let runtime = &state.app.runtime;
    let id = runtime.create_session(scenario)?;
    Ok((StatusCode::CREATED, Json(json!(runtime.session_info(&id)?))))
}

fn parse_scenario(value: &Value) -> ApiResult<Scenario> {
    Scenario::from_json(&value.to_string()).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_scenario", e))
}

async fn session_info(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(state.app.runtime.session_info(&id)?)))
}

#[derive(Deserialize)]
struct MessageBody {
    text: String,
    #[serde(default)]
    driver: Option<String>,
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let body: MessageBody = parse_body(&body)?;
    state.app.runtime.session_info(&id)?;
    let driver = state.session_driver(&id, body.driver.as_deref())?;
    let runtime = state.app.runtime.clone();
    let session = id.clone();
    let events = blocking(move || {
        let mut driver = driver.lock().expect("driver lock poisoned");
        runtime.run_session(&session, &body.text, driver.as_mut())
    })
    .await??;
    let info = state.app.runtime.session_info(&id)?;
    Ok(Json(json!({"session_id": id, "status": info.status, "events": events})))
}

#[derive(Deserialize)]
struct EventsQuery {
    after: Option<u64>,
}

fn to_sse(event: &Event) -> SseEvent {
    SseEvent::default()
        .id(event.seq.to_string())
        .event(event.kind.name())
        .data(serde_json::to_string(event).expect("event serializes"))
}

struct Cursor {
    state: Arc<AppState>,
    session_id: String,
    rx: broadcast::Receiver<(String, Event)>,
    pending: VecDeque<Event>,
    last: u64,
}

impl Cursor {
    fn refill(&mut self) {
        if let Ok(events) = self.state.app.runtime.events_after(&self.session_id, self.last) {
            self.pending = events.into();
        }
    }

    async fn next(&mut self) -> Option<Event> {
        loop {
            while let Some(event) = self.pending.pop_front() {
                if event.seq == self.last + 1 {
                    self.last = event.seq;
                    return Some(event);
                }
                if event.seq > self.last + 1 {
                    // something was skipped; the trajectory has it
                    self.refill();
                }
            }
            match self.rx.recv().await {
                Ok((session_id, event)) if session_id == self.session_id => self.pending.push_back(event),
                Ok(_) => {}
                Err(broadcast::error::RecvError::Lagged(_)) => self.refill(),
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    }
}

/// Replays the trajectory after `Last-Event-ID` (or `?after=`), then
/// follows live events. Event ids are sequence numbers.
async fn session_events(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(query): Query<EventsQuery>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<SseEvent, Infallible>>>> {
    let last = match headers.get("last-event-id") {
        Some(v) => v
            .to_str()
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| ApiError::bad_request("Last-Event-ID must be a sequence number"))?,
        None => query.after.unwrap_or(0),
    };
    // subscribe before reading the backlog so nothing falls in between
    let rx = state.events.subscribe();
    let backlog = state.app.runtime.events_after(&id, last)?;
    let cursor = Cursor {
        state: state.clone(),
        session_id: id,
        rx,
        pending: backlog.into(),
        last,
    };
    let stream = futures::stream::unfold(cursor, |mut cursor| async move {
        let event = cursor.next().await?;
        Some((Ok(to_sse(&event)), cursor))
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

async fn get_todos(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    state.app.runtime.session_info(&id)?;
    let list = state.app.runtime.todos().get(&id).map_err(OrchestratorError::from)?;
    Ok(Json(json!(list.items)))
}

/// Takes the bare list, or `{"todos": [...]}` as the tool does.
async fn put_todos(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let value: Value = parse_body(&body)?;
    let items = match value {
        Value::Object(mut m) if m.contains_key("todos") => m.remove("todos").unwrap_or_default(),
        v => v,
    };
    let items: Vec<TodoItem> =
        serde_json::from_value(items).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_body", e.to_string()))?;
    let runtime = state.app.runtime.clone();
    let list = blocking(move || runtime.write_todos(&id, items)).await??;
    Ok(Json(json!(list.items)))
}

/// Takes a scenario document, or `{"fixture": "<name>"}`.
async fn put_fixture(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let value: Value = parse_body(&body)?;
    let scenario = match value.get("fixture").and_then(Value::as_str) {
        Some(name) => state
            .app
            .scenario(name)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "unknown_fixture", format!("{e:#}")))?,
        None => parse_scenario(&value)?,
    };
    let runtime = state.app.runtime.clone();
    let session = id.clone();
    blocking(move || runtime.load_fixture(&session, scenario)).await??;
    Ok(Json(json!(state.app.runtime.session_info(&id)?)))
}

async fn fixture_drive(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let info = state.app.runtime.session_info(&id)?;
    let drive = state
        .app
        .runtime
        .drive(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no_fixture", "session has no fixture loaded"))?;
    let files: Vec<Value> = drive
        .iter()
        .map(|(path, bytes)| json!({"path": path, "size": bytes.len(), "content_base64": BASE64.encode(bytes)}))
        .collect();
    Ok(Json(json!({"scenario": info.scenario, "files": files})))
}

#[derive(Deserialize)]
struct MetricsQuery {
    mode: Option<String>,
}

async fn session_metrics(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(query): Query<MetricsQuery>,
) -> ApiResult<Json<Value>> {
    let mode = query
        .mode
        .map(|m| m.parse::<CostMode>())
        .transpose()
        .map_err(ApiError::bad_request)?;
    state.app.runtime.session_info(&id)?;
    match crate::app::metrics_report(&state.app.runtime, &id, mode) {
        Ok(report) => Ok(Json(report)),
        Err(e) => match e.downcast::<MetricsError>() {
            Ok(m) => Err(m.into()),
            Err(e) => Err(ApiError::internal(e)),
        },
    }
}
