//! HTTP/JSON session service for closed-loop teaching.
//!
//! Routes:
//!
//! - `GET /domains`
//! - `POST /sessions` — `{condition, domain, seed?}`; returns the intro and
//!   the first demonstration
//! - `GET /sessions/{id}/next` — the interaction the session is waiting on;
//!   repeatable until acknowledged. A test already handed out is answered
//!   with 409 (the body repeats it under `pending`).
//! - `POST /sessions/{id}/response` — `{type: "ack", likert?}` after a
//!   demonstration or feedback, `{type: "answer", trajectory, likert?}` for
//!   a test
//! - `GET /sessions/{id}/export` — `session/v1` bundle with `pf/v1` snapshots
//!
//! Each session is a single writer behind its own mutex; its log is an
//! append-only NDJSON file replayed on startup.

pub mod config;
pub mod session;
pub mod store;
pub mod wire;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde_json::json;
use teachloop::domain::load_domains;
use teachloop::mdp::Trajectory;
use teachloop::teaching::{Awaiting, Curriculum, Incoming, Mode, Next, TeachingConfig};
use tower_http::services::ServeDir;

pub use config::ServiceConfig;
use session::Session;
use store::{log_files, read_log, LogWriter};
use wire::*;

/// An error answered to the client as `{schema_version, error: {kind, message}}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
    /// Extra top-level fields for the body.
    pub extra: Option<(&'static str, serde_json::Value)>,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self { status, kind, message: message.into(), extra: None }
    }

    pub fn bad_request(m: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", m)
    }

    pub fn validation(m: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", m)
    }

    pub fn conflict(m: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", m)
    }

    pub fn not_found(m: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", m)
    }

    pub fn internal(m: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", m)
    }
}

impl From<teachloop::Error> for ApiError {
    fn from(e: teachloop::Error) -> Self {
        use teachloop::Error as E;
        let status = match &e {
            E::Protocol(_) => StatusCode::CONFLICT,
            E::InvalidTrajectory(_) | E::InvalidConfig(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.kind(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({
            "schema_version": API_SCHEMA,
            "error": {"kind": self.kind, "message": self.message},
        });
        if let Some((k, v)) = self.extra {
            body[k] = v;
        }
        (self.status, Json(body)).into_response()
    }
}

/// Why the service could not start.
#[derive(Debug, thiserror::Error)]
pub enum StartError {
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("loading pools: {0}")]
    Pool(#[from] teachloop::Error),
    #[error("{path}: {message}")]
    Log { path: String, message: String },
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
}

impl StartError {
    pub fn kind(&self) -> &'static str {
        match self {
            StartError::Config(_) => "invalid_config",
            StartError::Pool(e) => e.kind(),
            StartError::Log { .. } => "session_log",
            StartError::Bind { .. } => "bind",
        }
    }
}

type Shared = Arc<Mutex<Session>>;

pub struct AppState {
    pub curricula: BTreeMap<String, Arc<Curriculum>>,
    pub sessions: RwLock<HashMap<String, Shared>>,
    pub log_dir: Option<PathBuf>,
    pub teaching: TeachingConfig,
    pub seed: u64,
    created: AtomicU64,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

impl AppState {
    /// Loads the pools, builds each domain's curriculum and replays every
    /// session log in `cfg.log_dir`.
    pub fn load(cfg: &ServiceConfig) -> Result<Self, StartError> {
        cfg.validate()?;
        let domains = load_domains(&cfg.pool)?;
        let mut curricula = BTreeMap::new();
        for (name, d) in &domains {
            curricula.insert(name.clone(), Arc::new(Curriculum::new(d)?));
        }
        let state = Self::new(curricula, Some(cfg.log_dir.clone()), cfg.teaching.clone(), cfg.seed);
        state.replay_logs()?;
        Ok(state)
    }

    /// Without a log directory nothing is persisted.
    pub fn new(curricula: BTreeMap<String, Arc<Curriculum>>, log_dir: Option<PathBuf>, teaching: TeachingConfig, seed: u64) -> Self {
        Self { curricula, sessions: RwLock::new(HashMap::new()), log_dir, teaching, seed, created: AtomicU64::new(0) }
    }

    fn replay_logs(&self) -> Result<(), StartError> {
        let Some(dir) = &self.log_dir else { return Ok(()) };
        let err = |path: &std::path::Path, message: String| StartError::Log { path: path.display().to_string(), message };
        std::fs::create_dir_all(dir).map_err(|e| err(dir, e.to_string()))?;
        let mut sessions = self.sessions.write().expect("session map poisoned");
        for path in log_files(dir).map_err(|e| err(dir, e.to_string()))? {
            let records = read_log(&path).map_err(|m| err(&path, m))?;
            let Some(store::Record::Create { domain, .. }) = records.first() else {
                return Err(err(&path, "log does not start with a create record".into()));
            };
            let cur = self.curricula.get(domain).ok_or_else(|| err(&path, format!("unknown domain {domain}")))?;
            let writer = LogWriter::reopen(&path).map_err(|e| err(&path, e.to_string()))?;
            let s = Session::from_records(cur, &records, Some(writer)).map_err(|m| err(&path, m))?;
            tracing::info!(session = %s.id, inputs = s.inputs.len(), "replayed");
            sessions.insert(s.id.clone(), Arc::new(Mutex::new(s)));
        }
        self.created.store(sessions.len() as u64, Ordering::SeqCst);
        Ok(())
    }

    fn session(&self, id: &str) -> Result<(Shared, Arc<Curriculum>), ApiError> {
        let s = self
            .sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id}")))?;
        let domain = s.lock().map_err(|_| ApiError::internal("session lock poisoned"))?.domain.clone();
        Ok((s, self.curricula[&domain].clone()))
    }
}

pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/domains", get(domains))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next", get(next_interaction))
        .route("/sessions/{id}/response", post(submit_response))
        .route("/sessions/{id}/export", get(export_session))
        .with_state(state);
    match static_dir.filter(|d| d.is_dir()) {
        Some(d) => api.fallback_service(ServeDir::new(d)),
        None => api,
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

/// Runs `f` on the blocking pool with the session locked: controller steps
/// are CPU-bound and mutations within a session must be serialized.
async fn with_session<T: Send + 'static>(
    state: &AppState,
    id: &str,
    f: impl FnOnce(&mut Session, &Curriculum) -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    let (s, cur) = state.session(id)?;
    tokio::task::spawn_blocking(move || {
        let mut g = s.lock().map_err(|_| ApiError::internal("session lock poisoned"))?;
        f(&mut g, &cur)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn domains(State(state): State<Arc<AppState>>) -> Json<DomainsResponse> {
    let domains = state
        .curricula
        .iter()
        .map(|(name, cur)| DomainInfo {
            name: name.clone(),
            feature_names: cur.bank.feature_names.iter().map(|s| s.to_string()).collect(),
            budget: cur.budget,
            lessons: cur.bank.lessons.len(),
            teaching_environments: cur.candidates.iter().map(|c| c.id()).collect::<std::collections::BTreeSet<_>>().len(),
            conditions: Mode::ALL.iter().map(|m| m.as_str().to_string()).collect(),
        })
        .collect();
    Json(DomainsResponse { schema_version: API_SCHEMA.into(), domains })
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateRequest = parse(&body)?;
    if !envelope_schema_ok(&req.schema_version) {
        return Err(ApiError::validation(format!("unsupported schema_version, expected {API_SCHEMA}")));
    }
    let mode = Mode::parse(&req.condition)
        .ok_or_else(|| ApiError::validation(format!("unknown condition {:?}; expected open, partial or full", req.condition)))?;
    let cur = state
        .curricula
        .get(&req.domain)
        .cloned()
        .ok_or_else(|| ApiError::validation(format!("unknown domain {:?}", req.domain)))?;
    let k = state.created.fetch_add(1, Ordering::SeqCst);
    let seed = req.seed.unwrap_or(state.seed.wrapping_add(k));
    let config = TeachingConfig { mode, seed, ..state.teaching.clone() };
    let id = uuid::Uuid::new_v4().to_string();
    let log_dir = state.log_dir.clone();
    let (session, first) = tokio::task::spawn_blocking(move || -> Result<_, ApiError> {
        let writer = match &log_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| ApiError::internal(e.to_string()))?;
                Some(LogWriter::create(dir, &id).map_err(|e| ApiError::internal(e.to_string()))?)
            }
            None => None,
        };
        let (s, _) = Session::create(&cur, id, config, now_ms(), writer)?;
        let first = Payload::pending(&cur, &s.state);
        Ok((s, first))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    let cur = &state.curricula[&req.domain];
    let resp = CreateResponse {
        schema_version: API_SCHEMA.into(),
        session_id: session.id.clone(),
        condition: mode.as_str().into(),
        intro: Intro {
            domain: req.domain.clone(),
            feature_names: cur.bank.feature_names.iter().map(|s| s.to_string()).collect(),
            budget: session.state.budget,
        },
        first,
    };
    tracing::info!(session = %session.id, condition = %mode, domain = %req.domain, seed, "created");
    state.sessions.write().expect("session map poisoned").insert(session.id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(resp)).into_response())
}

async fn next_interaction(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Payload>, ApiError> {
    with_session(&state, &id, |s, cur| {
        let payload = Payload::pending(cur, &s.state);
        if let Awaiting::Response { event, .. } = &s.state.awaiting {
            let event = *event;
            if s.delivered == Some(event) {
                let mut e = ApiError::conflict(format!("awaiting the answer to test {event}"));
                e.extra = Some(("pending", serde_json::to_value(&payload).expect("payloads serialize")));
                return Err(e);
            }
            s.mark_delivered(event, now_ms())?;
        }
        Ok(Json(payload))
    })
    .await
}

fn check_likert(v: Option<u8>) -> Result<Option<u8>, ApiError> {
    match v {
        Some(x) if !(1..=7).contains(&x) => Err(ApiError::validation(format!("likert {x} outside 1..=7"))),
        _ => Ok(v),
    }
}

async fn submit_response(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<ResponseResult>, ApiError> {
    let req: ResponseEnvelope = parse(&body)?;
    if !envelope_schema_ok(&req.schema_version) {
        return Err(ApiError::validation(format!("unsupported schema_version, expected {API_SCHEMA}")));
    }
    with_session(&state, &id, move |s, cur| {
        let pending = match &s.state.awaiting {
            Awaiting::Ack { event } | Awaiting::Response { event, .. } => Some(*event),
            _ => None,
        };
        let stale = |claimed: Option<usize>| match (claimed, pending) {
            (Some(c), Some(p)) if c != p => Err(ApiError::conflict(format!("event {c} is not pending; {p} is"))),
            _ => Ok(()),
        };
        let now = now_ms();
        match req.body {
            ResponseRequest::Ack { event, likert } => {
                stale(event)?;
                let likert = check_likert(likert)?;
                s.apply(cur, Incoming::Ack, likert, now)?;
                Ok(Json(ResponseResult {
                    schema_version: API_SCHEMA.into(),
                    event: pending.unwrap_or_default(),
                    correct: None,
                    feedback: None,
                    done: s.state.is_done(),
                }))
            }
            ResponseRequest::Answer { event, trajectory, likert } => {
                stale(event)?;
                let likert = check_likert(likert)?;
                let Awaiting::Response { test, event } = &s.state.awaiting else {
                    return Err(ApiError::conflict("no test is awaiting an answer"));
                };
                let event = *event;
                let traj = Trajectory::from_actions(&test.env, test.start, &trajectory.actions)?;
                if let Some(path) = &trajectory.path {
                    if *path != traj.path() {
                        return Err(ApiError::validation("path does not follow the actions from the start cell"));
                    }
                }
                let out = s.apply(cur, Incoming::Response { trajectory: traj }, likert, now)?;
                let feedback = match &out.next {
                    Next::Event { event } if event.kind == teachloop::teaching::EventKind::Feedback => {
                        Some(Payload::event(cur, &s.state, event))
                    }
                    _ => None,
                };
                Ok(Json(ResponseResult {
                    schema_version: API_SCHEMA.into(),
                    event,
                    correct: out.grade.map(|g| g.correct),
                    feedback,
                    done: s.state.is_done(),
                }))
            }
        }
    })
    .await
}

async fn export_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<session::Export>, ApiError> {
    with_session(&state, &id, |s, _| Ok(Json(s.export()))).await
}

/// Binds the listener and builds the app; split from [`serve`] so callers
/// can learn the bound address.
pub async fn bind(cfg: &ServiceConfig) -> Result<(tokio::net::TcpListener, Router), StartError> {
    let c = cfg.clone();
    let state = tokio::task::spawn_blocking(move || AppState::load(&c))
        .await
        .map_err(|e| StartError::Config(vec![e.to_string()]))??;
    let addr = format!("{}:{}", cfg.host, cfg.port);
    let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|source| StartError::Bind { addr, source })?;
    Ok((listener, router(Arc::new(state), cfg.static_dir.clone())))
}

/// Serves until `shutdown` resolves. Logs are synced on every write, so
/// nothing is left to flush afterwards.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let addr: Option<SocketAddr> = listener.local_addr().ok();
    tracing::info!(?addr, "listening");
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}
