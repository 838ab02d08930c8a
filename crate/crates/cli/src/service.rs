//! HTTP service: sessions, their event streams, the guidance queue, tool
//! search and sweeps.

use std::collections::{BTreeMap, HashMap};
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use toolforge_core::env::ProblemInstance;
use toolforge_core::hitl::{GuidanceAction, GuidanceQueue, HitlError, QueueHuman};
use toolforge_core::library::{SearchHit, StatusFilter};
use toolforge_core::orchestrator::{
    load_session, persist_session, replay_state, EventLog, OrchestratorError, Runtime, Session, SessionConfig,
    SessionEvent, SessionMode, SessionSummary,
};
use toolforge_core::sweep::{sweep, SweepReport, SweepSpace};

use crate::runner::run_trial;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Running,
    Finished,
    Failed,
}

struct SessionHandle {
    log: EventLog,
    status: RunStatus,
    summary: Option<SessionSummary>,
    error: Option<String>,
}

struct SweepHandle {
    status: RunStatus,
    report: Option<SweepReport>,
    error: Option<String>,
}

pub struct AppState {
    problems: Vec<ProblemInstance>,
    store: Option<PathBuf>,
    queue: Arc<GuidanceQueue>,
    sessions: RwLock<HashMap<String, SessionHandle>>,
    sweeps: RwLock<BTreeMap<String, SweepHandle>>,
    /// Upper bound for one long-poll request.
    pub long_poll: Duration,
}

impl AppState {
    pub fn new(problems: Vec<ProblemInstance>, store: Option<PathBuf>) -> Arc<Self> {
        Arc::new(Self {
            problems,
            store,
            queue: Arc::new(GuidanceQueue::new()),
            sessions: RwLock::new(HashMap::new()),
            sweeps: RwLock::new(BTreeMap::new()),
            long_poll: Duration::from_secs(20),
        })
    }

    pub fn queue(&self) -> &Arc<GuidanceQueue> {
        &self.queue
    }

    fn finish(&self, id: &str, result: Result<SessionSummary, String>) {
        if let Some(h) = self.sessions.write().get_mut(id) {
            match result {
                Ok(summary) => {
                    h.status = RunStatus::Finished;
                    h.summary = Some(summary);
                }
                Err(e) => {
                    h.status = RunStatus::Failed;
                    h.error = Some(e);
                }
            }
        }
    }
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        let code = match &e {
            OrchestratorError::InvalidConfig(_) | OrchestratorError::UnknownProblem(_) => StatusCode::UNPROCESSABLE_ENTITY,
            OrchestratorError::UnknownSession(_) => StatusCode::NOT_FOUND,
            OrchestratorError::StoreUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

impl From<HitlError> for ApiError {
    fn from(e: HitlError) -> Self {
        let code = match &e {
            HitlError::UnknownRequest(_) => StatusCode::NOT_FOUND,
            HitlError::IllegalActionForPhase { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::CONFLICT,
        };
        ApiError(code, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/problems", get(problems))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_summary))
        .route("/sessions/{id}/events", get(session_events))
        .route("/guidance/pending", get(pending_guidance))
        .route("/guidance/{id}", post(submit_guidance))
        .route("/tools", get(search_tools))
        .route("/sweeps", post(create_sweep))
        .route("/sweeps/{id}", get(sweep_status))
        .with_state(state)
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

/// Problem descriptions without target documents.
async fn problems(State(app): State<Arc<AppState>>) -> Json<Value> {
    let list: Vec<Value> = app
        .problems
        .iter()
        .map(|p| {
            json!({
                "id": p.id,
                "title": p.title,
                "abstract": p.abstract_text,
                "goal": p.goal,
                "actions": p.actions,
                "doc_class": p.target.as_ref().map(|t| t.doc_class),
                "hidden_reference": p.target.is_some(),
            })
        })
        .collect();
    Json(Value::Array(list))
}

async fn create_session(State(app): State<Arc<AppState>>, Json(config): Json<SessionConfig>) -> ApiResult<(StatusCode, Json<Value>)> {
    let id = config.resolved_session_id();
    if app.sessions.read().contains_key(&id) {
        return Err(ApiError(StatusCode::CONFLICT, format!("session `{id}` already exists")));
    }
    let mut runtime = Runtime::from_config(&config);
    if runtime.channel.is_none() {
        runtime = runtime.with_channel(Arc::new(QueueHuman { queue: app.queue.clone() }));
    }
    let problems = app.problems.clone();
    let mut session = tokio::task::spawn_blocking(move || Session::start(config, problems, runtime))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    app.sessions.write().insert(
        id.clone(),
        SessionHandle {
            log: session.log(),
            status: RunStatus::Running,
            summary: None,
            error: None,
        },
    );
    let worker = app.clone();
    let sid = id.clone();
    std::thread::spawn(move || {
        let result = session.run().map_err(|e| e.to_string());
        if let Some(root) = &worker.store {
            if let Err(e) = persist_session(root, session.id(), &session.events()) {
                tracing::error!(session = %sid, error = %e, "persisting session failed");
            }
        }
        worker.finish(&sid, result);
    });
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
}

fn stored_events(app: &AppState, id: &str) -> ApiResult<Vec<SessionEvent>> {
    let root = app
        .store
        .as_ref()
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown session `{id}`")))?;
    Ok(load_session(root, id)?.0)
}

async fn session_summary(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let live = app.sessions.read().get(&id).map(|h| (h.status, h.summary.clone(), h.error.clone(), h.log.snapshot()));
    let (status, summary, error) = match live {
        Some((status, Some(summary), error, _)) => (status, summary, error),
        Some((status, None, error, events)) => (status, replay_state(&events)?.summary(), error),
        None => {
            let events = stored_events(&app, &id)?;
            (RunStatus::Finished, replay_state(&events)?.summary(), None)
        }
    };
    Ok(Json(json!({ "id": id, "status": status, "summary": summary, "error": error })))
}

#[derive(Debug, Deserialize)]
pub struct EventsQuery {
    #[serde(default)]
    from: u64,
    /// Long-poll wait in seconds; capped by the service limit.
    wait: Option<f64>,
}

fn wants_stream(headers: &HeaderMap) -> bool {
    headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("text/event-stream"))
}

fn sse_event(e: &SessionEvent) -> Event {
    Event::default()
        .id(e.seq.to_string())
        .event(e.kind.as_str())
        .data(serde_json::to_string(e).expect("event serializes"))
}

fn event_stream(app: Arc<AppState>, id: String, log: EventLog, from: u64) -> impl Stream<Item = Result<Event, Infallible>> {
    stream::unfold(from, move |next| {
        let (app, id, log) = (app.clone(), id.clone(), log.clone());
        async move {
            loop {
                // Status first: once a session stops running its log is complete.
                let running = app.sessions.read().get(&id).is_some_and(|h| h.status == RunStatus::Running);
                let fresh = log.since(next);
                if !fresh.is_empty() {
                    let next = next + fresh.len() as u64;
                    let events: Vec<Result<Event, Infallible>> = fresh.iter().map(|e| Ok(sse_event(e))).collect();
                    return Some((stream::iter(events), next));
                }
                if !running {
                    return None;
                }
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
        }
    })
    .flatten()
}

async fn session_events(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let live = app.sessions.read().get(&id).map(|h| (h.log.clone(), h.status));
    let Some((log, status)) = live else {
        let events = stored_events(&app, &id)?;
        let from = q.from.min(events.len() as u64) as usize;
        return Ok(Json(&events[from..]).into_response());
    };
    if wants_stream(&headers) {
        let stream = event_stream(app.clone(), id, log, q.from);
        return Ok(Sse::new(stream).keep_alive(KeepAlive::default()).into_response());
    }
    let wait = Duration::from_secs_f64(q.wait.unwrap_or(0.0).max(0.0)).min(app.long_poll);
    let events = if status == RunStatus::Running && !wait.is_zero() {
        tokio::task::spawn_blocking(move || log.wait_since(q.from, wait))
            .await
            .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    } else {
        log.since(q.from)
    };
    Ok(Json(events).into_response())
}

async fn pending_guidance(State(app): State<Arc<AppState>>) -> Json<Value> {
    Json(json!(app.queue.pending()))
}

#[derive(Debug, Deserialize)]
pub struct Submission {
    #[serde(flatten)]
    action: GuidanceAction,
    #[serde(default = "default_operator")]
    operator: String,
}

fn default_operator() -> String {
    "operator".into()
}

async fn submit_guidance(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<Submission>,
) -> ApiResult<Json<Value>> {
    let ack = app.queue.resolve(&id, body.action, &body.operator)?;
    Ok(Json(json!(ack)))
}

#[derive(Debug, Deserialize)]
pub struct ToolsQuery {
    #[serde(default)]
    query: String,
    #[serde(default = "default_k")]
    k: usize,
    session: Option<String>,
}

fn default_k() -> usize {
    5
}

/// Searches the libraries of live sessions (or one of them), best hits first.
async fn search_tools(State(app): State<Arc<AppState>>, Query(q): Query<ToolsQuery>) -> ApiResult<Json<Vec<Value>>> {
    let logs: Vec<(String, EventLog)> = {
        let sessions = app.sessions.read();
        let mut v: Vec<_> = sessions
            .iter()
            .filter(|(id, _)| q.session.as_ref().map_or(true, |s| s == *id))
            .map(|(id, h)| (id.clone(), h.log.clone()))
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    };
    if let Some(s) = &q.session {
        if logs.is_empty() {
            return Err(ApiError(StatusCode::NOT_FOUND, format!("unknown session `{s}`")));
        }
    }
    let mut hits: Vec<(String, SearchHit)> = Vec::new();
    for (id, log) in logs {
        let state = replay_state(&log.snapshot())?;
        let found = state
            .library
            .search_tools(&q.query, q.k, StatusFilter::Any)
            .map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?;
        hits.extend(found.into_iter().map(|h| (id.clone(), h)));
    }
    hits.sort_by(|a, b| b.1.similarity.total_cmp(&a.1.similarity));
    hits.truncate(q.k);
    Ok(Json(
        hits.into_iter()
            .map(|(session, h)| json!({ "session": session, "id": h.id, "name": h.name, "similarity": h.similarity, "status": h.status }))
            .collect(),
    ))
}

#[derive(Debug, Deserialize)]
pub struct SweepRequest {
    space: SweepSpace,
    #[serde(default)]
    base: SessionConfig,
}

async fn create_sweep(State(app): State<Arc<AppState>>, Json(req): Json<SweepRequest>) -> ApiResult<(StatusCode, Json<Value>)> {
    req.space
        .validate(&req.base)
        .map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    if req.base.mode != SessionMode::Auto && req.base.human.is_none() {
        return Err(ApiError(StatusCode::UNPROCESSABLE_ENTITY, "sweep trials run without an operator".into()));
    }
    let id = {
        let mut sweeps = app.sweeps.write();
        let id = format!("sweep-{}", sweeps.len());
        sweeps.insert(
            id.clone(),
            SweepHandle {
                status: RunStatus::Running,
                report: None,
                error: None,
            },
        );
        id
    };
    let worker = app.clone();
    let sid = id.clone();
    std::thread::spawn(move || {
        let result = sweep(&req.space, &req.base, |c| run_trial(c, &worker.problems));
        if let Some(h) = worker.sweeps.write().get_mut(&sid) {
            match result {
                Ok(report) => {
                    h.status = RunStatus::Finished;
                    h.report = Some(report);
                }
                Err(e) => {
                    h.status = RunStatus::Failed;
                    h.error = Some(e.to_string());
                }
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "id": id }))))
}

async fn sweep_status(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let sweeps = app.sweeps.read();
    let h = sweeps
        .get(&id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown sweep `{id}`")))?;
    Ok(Json(json!({ "id": id, "status": h.status, "report": h.report, "error": h.error })))
}
