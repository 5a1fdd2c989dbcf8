//! HTTP/JSON front end for human-in-the-loop adaptation.
//!
//! | method | path                                   | body / query                  | answer                  |
//! |--------|----------------------------------------|-------------------------------|-------------------------|
//! | POST   | `/sessions`                            | [`CreateSession`]             | [`SessionCreated`]      |
//! | GET    | `/sessions/{id}/tasks`                 | `?batch=b`                    | `[AnnotationTask]`      |
//! | POST   | `/sessions/{id}/tasks/{tid}/label`     | [`LabelRequest`]              | [`LabelAck`]            |
//! | GET    | `/sessions/{id}/status`                |                               | [`StatusDoc`]           |
//! | GET    | `/sessions/{id}/report`                |                               | `EvalReport`            |
//! | GET    | `/sessions/{id}/images/{path}`         |                               | image bytes             |
//!
//! Errors come back as [`ErrorBody`] with 400 (carrying the offending
//! `field`), 404 or 409.
//!
//! Only one update batch has tasks out at a time. Answering or skipping its
//! last pending task schedules the incremental update in the background; the
//! session reports `updating` until the new checkpoint is on disk, and task
//! requests wait for it. Status reads never wait: they return the latest
//! published snapshot.

pub mod error;
pub mod session;
pub mod store;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::{watch, Mutex};
use tower_http::services::ServeDir;

use tma_core::adaptation::AdaptConfig;
use tma_core::eval::EvalReport;

pub use error::{ErrorBody, Result, ServiceError};
pub use session::{CheckpointSummary, LabelAck, LabelRequest, Phase, SessionData, StatusDoc};
pub use store::{AnnotationTask, TaskState};

/// Environment variable holding the bind address.
pub const BIND_ENV: &str = "TMA_BIND";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

pub struct SessionHandle {
    pub id: String,
    data: Mutex<SessionData>,
    status: RwLock<Arc<StatusDoc>>,
    phase: watch::Sender<Phase>,
}

impl SessionHandle {
    fn new(data: SessionData) -> Arc<Self> {
        let status = Arc::new(data.status(Phase::Ready));
        Arc::new(Self {
            id: data.meta.id.clone(),
            data: Mutex::new(data),
            status: RwLock::new(status),
            phase: watch::Sender::new(Phase::Ready),
        })
    }

    pub fn status(&self) -> Arc<StatusDoc> {
        self.status.read().expect("status lock poisoned").clone()
    }

    fn publish(&self, data: &SessionData) {
        let doc = Arc::new(data.status(*self.phase.borrow()));
        *self.status.write().expect("status lock poisoned") = doc;
    }

    /// Waits until no update runs, then locks the session.
    async fn lock_ready(&self) -> tokio::sync::MutexGuard<'_, SessionData> {
        let mut rx = self.phase.subscribe();
        loop {
            // only fails once the sender is gone, and the handle owns it
            let _ = rx.wait_for(|p| *p == Phase::Ready).await;
            let guard = self.data.lock().await;
            if *self.phase.borrow() == Phase::Ready {
                return guard;
            }
        }
    }
}

/// Starts the incremental update of batch `b` off the request path. The
/// caller holds the session lock.
fn schedule_update(handle: &Arc<SessionHandle>, data: &SessionData, b: usize) {
    handle.phase.send_replace(Phase::Updating);
    handle.publish(data);
    let mut session = data.session.clone();
    let selection = data.tasks[&b].selection.clone();
    let test = data.test.clone();
    let mut report = data.report.clone();
    let name = format!("TMA_{}", data.session.checkpoints.len() + 1);
    let handle = handle.clone();
    tracing::info!(session = %handle.id, batch = b, "update scheduled");
    tokio::spawn(async move {
        let work = tokio::task::spawn_blocking(move || -> Result<_> {
            session.apply_update(b, &selection)?;
            let labeled = session.label_log.queried();
            let row = report.push_model(name, &session.model, &test.probes, &test.gallery, labeled)?.clone();
            Ok((session, row))
        })
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))
        .and_then(|r| r);
        let mut data = handle.data.lock().await;
        let outcome = work.and_then(|(session, row)| data.finish_update(b, session, row));
        if let Err(e) = outcome {
            tracing::error!(session = %handle.id, batch = b, "update failed: {e}");
            data.last_error = Some(format!("update of batch {b} failed: {e}"));
        } else {
            tracing::info!(session = %handle.id, batch = b, "update finished");
        }
        handle.phase.send_replace(Phase::Ready);
        handle.publish(&data);
    });
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<AppInner>,
}

struct AppInner {
    root: PathBuf,
    sessions: Mutex<HashMap<String, Arc<SessionHandle>>>,
}

impl AppState {
    /// Sessions live under `{root}/sessions`.
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { inner: Arc::new(AppInner { root: root.into(), sessions: Mutex::new(HashMap::new()) }) }
    }

    pub fn root(&self) -> &Path {
        &self.inner.root
    }

    /// Creates a session, or resumes it when `session_id` names one on disk.
    pub async fn create_session(&self, req: CreateSession) -> Result<SessionCreated> {
        let id = match req.session_id {
            Some(id) => {
                validate_id(&id)?;
                id
            }
            None => uuid::Uuid::new_v4().simple().to_string(),
        };
        let mut sessions = self.inner.sessions.lock().await;
        if let Some(h) = sessions.get(&id) {
            return Ok(SessionCreated { session_id: id, status: h.status().phase, resumed: true });
        }
        let root = self.inner.root.clone();
        let resumed = store::SessionPaths::new(&root, &id).exists();
        let handle = if resumed {
            self.restore(&id).await?
        } else {
            let manifest = req.manifest.ok_or_else(|| ServiceError::bad_request("manifest", "a dataset manifest path is required"))?;
            let config: AdaptConfig = match req.config {
                Some(v) => serde_json::from_value(v).map_err(|e| ServiceError::bad_request("config", e))?,
                None => AdaptConfig::default(),
            };
            let sid = id.clone();
            let data = tokio::task::spawn_blocking(move || SessionData::create(&root, &sid, &manifest, config))
                .await
                .map_err(|e| ServiceError::Internal(e.to_string()))??;
            tracing::info!(session = %id, "session created");
            SessionHandle::new(data)
        };
        let phase = *handle.phase.borrow();
        sessions.insert(id.clone(), handle);
        Ok(SessionCreated { session_id: id, status: phase, resumed })
    }

    async fn restore(&self, id: &str) -> Result<Arc<SessionHandle>> {
        let (root, sid) = (self.inner.root.clone(), id.to_string());
        let data = tokio::task::spawn_blocking(move || SessionData::restore(&root, &sid))
            .await
            .map_err(|e| ServiceError::Internal(e.to_string()))??;
        tracing::info!(session = %id, completed = ?data.meta.completed, "session restored");
        let handle = SessionHandle::new(data);
        {
            let data = handle.data.lock().await;
            if let Some(b) = data.resolved_open_batch() {
                schedule_update(&handle, &data, b);
            }
        }
        Ok(handle)
    }

    /// A live session, restored from disk on first use after a restart.
    pub async fn session(&self, id: &str) -> Result<Arc<SessionHandle>> {
        let mut sessions = self.inner.sessions.lock().await;
        if let Some(h) = sessions.get(id) {
            return Ok(h.clone());
        }
        if validate_id(id).is_err() || !store::SessionPaths::new(&self.inner.root, id).exists() {
            return Err(ServiceError::NotFound(format!("no session {id}")));
        }
        let handle = self.restore(id).await?;
        sessions.insert(id.to_string(), handle.clone());
        Ok(handle)
    }

    /// Pending tasks of update batch `b`, selecting them on first request.
    pub async fn next_tasks(&self, id: &str, b: usize) -> Result<Vec<AnnotationTask>> {
        let handle = self.session(id).await?;
        let mut data = handle.lock_ready().await;
        data.check_batch(b)?;
        if data.is_completed(b) || data.tasks.contains_key(&b) {
            return Ok(data.pending_tasks(b));
        }
        if let Some(open) = data.open_batch() {
            return Err(ServiceError::Conflict(format!("batch {open} still has tasks out")));
        }
        let session = data.session.clone();
        let selection = tokio::task::spawn_blocking(move || session.select_batch(b))
            .await
            .map_err(|e| ServiceError::Internal(e.to_string()))??;
        data.install_selection(selection)?;
        if data.tasks[&b].pending() == 0 {
            schedule_update(&handle, &data, b);
        } else {
            handle.publish(&data);
        }
        Ok(data.pending_tasks(b))
    }

    pub async fn submit_label(&self, id: &str, task_id: &str, req: LabelRequest) -> Result<LabelAck> {
        let handle = self.session(id).await?;
        let mut data = handle.data.lock().await;
        let (task, batch_pending) = data.submit(task_id, &req)?;
        if batch_pending == 0 && *handle.phase.borrow() == Phase::Ready && !data.is_completed(task.batch) {
            schedule_update(&handle, &data, task.batch);
        } else {
            handle.publish(&data);
        }
        let phase = *handle.phase.borrow();
        Ok(LabelAck { task, batch_pending, phase })
    }

    pub async fn status(&self, id: &str) -> Result<Arc<StatusDoc>> {
        Ok(self.session(id).await?.status())
    }

    pub async fn report(&self, id: &str) -> Result<EvalReport> {
        let handle = self.session(id).await?;
        let data = handle.data.lock().await;
        Ok(data.report.clone())
    }

    /// Reads an image referenced by one of the session's records.
    pub async fn image(&self, id: &str, path: &str) -> Result<(Vec<u8>, &'static str)> {
        let handle = self.session(id).await?;
        let file = {
            let data = handle.data.lock().await;
            let rel = Path::new(path);
            let clean = rel.components().all(|c| matches!(c, Component::Normal(_)));
            if !clean || !data.images.contains(path) {
                return Err(ServiceError::NotFound(format!("no image {path}")));
            }
            data.dataset_dir.join(rel)
        };
        let bytes = tokio::fs::read(&file).await.map_err(|_| ServiceError::NotFound(format!("no image {path}")))?;
        Ok((bytes, content_type(path)))
    }

    /// Routes for the API; `static_dir`, when given, serves the UI bundle
    /// for every other path.
    pub fn router(self, static_dir: Option<PathBuf>) -> Router {
        let api = Router::new()
            .route("/sessions", post(create_session))
            .route("/sessions/{id}/tasks", get(next_tasks))
            .route("/sessions/{id}/tasks/{tid}/label", post(submit_label))
            .route("/sessions/{id}/status", get(status))
            .route("/sessions/{id}/report", get(report))
            .route("/sessions/{id}/images/{*path}", get(image))
            .with_state(self);
        match static_dir {
            Some(dir) => api.fallback_service(ServeDir::new(dir)),
            None => api,
        }
    }
}

fn validate_id(id: &str) -> Result<()> {
    let ok = !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(ServiceError::bad_request("session_id", "use 1 to 64 characters from [A-Za-z0-9_-]"))
    }
}

fn content_type(path: &str) -> &'static str {
    let ext = Path::new(path).extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "bmp" => "image/bmp",
        "gif" => "image/gif",
        "webp" => "image/webp",
        _ => "application/octet-stream",
    }
}

/// Body of `POST /sessions`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CreateSession {
    /// Dataset manifest path, as seen by the server.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// An adaptation config; omitted fields take their defaults.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
    /// Resume this session if it exists, otherwise create it under this id.
    #[serde(default)]
    pub session_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub status: Phase,
    pub resumed: bool,
}

#[derive(Deserialize)]
struct BatchQuery {
    batch: usize,
}

async fn create_session(State(app): State<AppState>, Json(req): Json<CreateSession>) -> Result<Response> {
    let created = app.create_session(req).await?;
    let code = if created.resumed { StatusCode::OK } else { StatusCode::CREATED };
    Ok((code, Json(created)).into_response())
}

async fn next_tasks(State(app): State<AppState>, UrlPath(id): UrlPath<String>, Query(q): Query<BatchQuery>) -> Result<Json<Vec<AnnotationTask>>> {
    Ok(Json(app.next_tasks(&id, q.batch).await?))
}

async fn submit_label(
    State(app): State<AppState>,
    UrlPath((id, tid)): UrlPath<(String, String)>,
    Json(req): Json<LabelRequest>,
) -> Result<Json<LabelAck>> {
    Ok(Json(app.submit_label(&id, &tid, req).await?))
}

async fn status(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<StatusDoc>> {
    Ok(Json(app.status(&id).await?.as_ref().clone()))
}

async fn report(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<EvalReport>> {
    Ok(Json(app.report(&id).await?))
}

async fn image(State(app): State<AppState>, UrlPath((id, path)): UrlPath<(String, String)>) -> Result<Response> {
    let (bytes, mime) = app.image(&id, &path).await?;
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

/// Bind address from [`BIND_ENV`], falling back to [`DEFAULT_BIND`].
pub fn bind_address() -> std::result::Result<SocketAddr, String> {
    let raw = std::env::var(BIND_ENV).unwrap_or_else(|_| DEFAULT_BIND.to_string());
    raw.parse().map_err(|e| format!("{BIND_ENV}={raw}: {e}"))
}

/// Serves until Ctrl-C.
pub async fn serve(router: Router, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
