//! JSON review API over the identity registry, plus static UI assets.
//!
//! | method | path                              |
//! |--------|-----------------------------------|
//! | GET    | /api/health                       |
//! | GET    | /api/candidates?status=           |
//! | POST   | /api/candidates/{id}/decision     |
//! | GET    | /api/identities                   |
//! | GET    | /api/identities/{uuid}            |
//! | POST   | /api/identities/merge             |
//! | GET    | /api/reports/{room-slug}          |
//!
//! The registry is read from disk on every request so the service always
//! agrees with CLI runs. Mutations are serialized through one mutex and take
//! the storage writer lock for the duration of the change. Errors are
//! `{"code": ..., "message": ...}`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tower_http::services::ServeDir;

use super::{actor_or_default, stored_report, OrchestratorError};
use crate::identities::{
    AuditEntry, CandidateStatus, ClusterOrigin, Decision, Identity, IdentityError, MergeCandidate,
    Registry,
};
use crate::sources::Clock;
use crate::store::{StorageLock, StoreError};

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub storage_dir: PathBuf,
    pub ui_dir: Option<PathBuf>,
    pub port: u16,
    /// Bind all interfaces instead of loopback only.
    pub public: bool,
}

#[derive(Clone)]
struct AppState {
    storage_dir: PathBuf,
    clock: Arc<dyn Clock>,
    writes: Arc<Mutex<()>>,
}

struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl ToString) -> Self {
        ApiError {
            status,
            code,
            message: message.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(json!({ "code": self.code, "message": self.message }));
        (self.status, body).into_response()
    }
}

impl From<IdentityError> for ApiError {
    fn from(e: IdentityError) -> Self {
        match e {
            IdentityError::UnknownCandidate(_)
            | IdentityError::UnknownCluster(_)
            | IdentityError::UnknownIdentity(_) => ApiError::new(StatusCode::NOT_FOUND, "not_found", e),
            IdentityError::AlreadyDecided(_) => ApiError::new(StatusCode::CONFLICT, "already_decided", e),
            IdentityError::EmptyUsername | IdentityError::BadThreshold(_) => {
                ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e)
            }
            IdentityError::Store(e) => e.into(),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Locked(_) => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "locked", e),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage", e),
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    #[serde(flatten)]
    pub candidate: MergeCandidate,
    pub left: Option<Identity>,
    pub right: Option<Identity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterView {
    pub uuid: String,
    pub created_by: ClusterOrigin,
    pub members: Vec<Identity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<Vec<AuditEntry>>,
}

fn cluster_view(reg: &Registry, uuid: &str, with_audit: bool) -> Option<ClusterView> {
    let cluster = reg.cluster(uuid)?;
    Some(ClusterView {
        uuid: cluster.uuid.clone(),
        created_by: cluster.created_by,
        members: cluster
            .members
            .iter()
            .filter_map(|id| reg.identity(id).cloned())
            .collect(),
        audit: with_audit.then(|| reg.audit_trail(uuid)),
    })
}

impl AppState {
    fn registry(&self) -> Result<Registry, ApiError> {
        Ok(Registry::load(&self.storage_dir)?)
    }

    /// Runs one registry mutation under the write mutex and storage lock.
    fn mutate<T>(&self, f: impl FnOnce(&mut Registry) -> Result<T, IdentityError>) -> Result<T, ApiError> {
        let _serial = self.writes.lock().unwrap_or_else(|e| e.into_inner());
        let _lock = StorageLock::acquire(&self.storage_dir)?;
        let mut reg = Registry::load(&self.storage_dir)?;
        let out = f(&mut reg)?;
        reg.save(&self.storage_dir)?;
        Ok(out)
    }
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok", "version": crate::PIPELINE_VERSION }))
}

#[derive(Deserialize)]
struct StatusQuery {
    status: Option<String>,
}

async fn list_candidates(
    State(state): State<AppState>,
    Query(q): Query<StatusQuery>,
) -> ApiResult<Vec<CandidateView>> {
    let status = match q.status.as_deref().filter(|s| !s.is_empty()) {
        None => None,
        Some(s) => Some(
            s.parse::<CandidateStatus>()
                .map_err(|m| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", m))?,
        ),
    };
    let reg = state.registry()?;
    Ok(Json(
        reg.candidates(status)
            .into_iter()
            .map(|c| CandidateView {
                left: reg.identity(&c.identity_a).cloned(),
                right: reg.identity(&c.identity_b).cloned(),
                candidate: c,
            })
            .collect(),
    ))
}

#[derive(Deserialize)]
struct DecisionBody {
    action: Decision,
    actor: Option<String>,
}

async fn decide(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<DecisionBody>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<MergeCandidate> {
    let Json(body) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text()))?;
    let actor = actor_or_default(body.actor.as_deref());
    let now = state.clock.now();
    state
        .mutate(|reg| reg.decide_candidate(&id, body.action, &actor, now))
        .map(Json)
}

async fn list_identities(State(state): State<AppState>) -> ApiResult<Vec<ClusterView>> {
    let reg = state.registry()?;
    Ok(Json(
        reg.clusters()
            .filter_map(|c| cluster_view(&reg, &c.uuid, false))
            .collect(),
    ))
}

async fn get_identity(State(state): State<AppState>, Path(uuid): Path<String>) -> ApiResult<ClusterView> {
    let reg = state.registry()?;
    cluster_view(&reg, &uuid, true)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown cluster {uuid}")))
}

#[derive(Deserialize)]
struct MergeBody {
    uuid_a: String,
    uuid_b: String,
    actor: Option<String>,
}

async fn merge(
    State(state): State<AppState>,
    body: Result<Json<MergeBody>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<ClusterView> {
    let Json(body) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text()))?;
    let actor = actor_or_default(body.actor.as_deref());
    let now = state.clock.now();
    let (reg, uuid) = state.mutate(|reg| {
        let merged = reg.merge(&body.uuid_a, &body.uuid_b, &actor, now)?;
        Ok((reg.clone(), merged.uuid))
    })?;
    Ok(Json(cluster_view(&reg, &uuid, true).expect("merged cluster exists")))
}

async fn get_report(State(state): State<AppState>, Path(slug): Path<String>) -> ApiResult<Value> {
    let slug = slug.replace('/', "_");
    if slug.contains("..") {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "invalid room slug"));
    }
    stored_report(&state.storage_dir, &slug)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no report for {slug}")))
}

async fn api_not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/candidates", get(list_candidates))
        .route("/candidates/:id/decision", post(decide))
        .route("/identities", get(list_identities))
        .route("/identities/merge", post(merge))
        .route("/identities/:uuid", get(get_identity))
        .route("/reports/:slug", get(get_report))
        .fallback(api_not_found)
        .with_state(state);
    let app = Router::new().nest("/api", api);
    match ui_dir {
        Some(dir) => app.nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true)),
        None => app,
    }
}

/// A running review service. Dropping the handle shuts it down.
pub struct ReviewServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ReviewServer {
    /// Binds and starts serving on a background thread.
    pub fn start(opts: &ServeOptions, clock: Arc<dyn Clock>) -> Result<Self, OrchestratorError> {
        let ip = if opts.public { [0, 0, 0, 0] } else { [127, 0, 0, 1] };
        let addr = SocketAddr::from((ip, opts.port));
        let port_in_use = |source| OrchestratorError::PortInUse {
            addr: addr.to_string(),
            source,
        };
        let listener = std::net::TcpListener::bind(addr).map_err(port_in_use)?;
        listener.set_nonblocking(true).map_err(port_in_use)?;
        let bound = listener.local_addr().map_err(port_in_use)?;

        let state = AppState {
            storage_dir: opts.storage_dir.clone(),
            clock,
            writes: Arc::new(Mutex::new(())),
        };
        let app = router(state, opts.ui_dir.clone());
        let (tx, rx) = oneshot::channel::<()>();
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .map_err(port_in_use)?;
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        tracing::error!(error = %e, "cannot adopt listener");
                        return;
                    }
                };
                let serve = axum::serve(listener, app).with_graceful_shutdown(async {
                    let _ = rx.await;
                });
                if let Err(e) = serve.await {
                    tracing::error!(error = %e, "review service stopped");
                }
            });
        });
        tracing::info!(%bound, "review service listening");
        Ok(ReviewServer {
            addr: bound,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting connections and waits for in-flight requests.
    pub fn shutdown(mut self) {
        self.stop();
    }

    /// Blocks until the service exits on its own.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ReviewServer {
    fn drop(&mut self) {
        self.stop();
    }
}
