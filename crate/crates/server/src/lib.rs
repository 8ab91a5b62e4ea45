//! HTTP chat service: worker pool, sessions and the feedback log.
//!
//! | method | path          | body                                   | reply                                 |
//! |--------|---------------|----------------------------------------|---------------------------------------|
//! | POST   | `/api/chat`   | `{session_id: string?, message}`       | `{session_id, turn_id, reply, emotion}` |
//! | POST   | `/api/report` | `{session_id, turn_id}`                | `{ok: true}`                          |
//! | POST   | `/api/edit`   | `{session_id, turn_id, revised}`       | `{ok: true}`                          |
//! | GET    | `/api/health` |                                        | `{status, workers, queue_depth}`      |
//!
//! Any other path is served from the static directory when one is configured.

pub mod feedback;
pub mod pool;
pub mod session;

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use caire_core::corpus::{default_persona, DEFAULT_HISTORY_WINDOW};
pub use feedback::{export_feedback, ExportSummary, FeedbackKind, FeedbackLog, FeedbackRecord};
pub use pool::{select_worker, Engine, PoolError, PoolStats, WorkerLoad, WorkerPool};
pub use session::{Session, SessionStore};

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub workers: usize,
    pub queue_capacity: usize,
    pub feedback_path: PathBuf,
    pub static_dir: Option<PathBuf>,
    pub persona: Vec<String>,
    pub history_window: usize,
    /// Sessions are restored from and saved to this file when set.
    pub session_snapshot: Option<PathBuf>,
}

impl ServerConfig {
    pub fn new(feedback_path: impl Into<PathBuf>) -> Self {
        Self {
            workers: pool::DEFAULT_WORKERS,
            queue_capacity: pool::DEFAULT_QUEUE_CAPACITY,
            feedback_path: feedback_path.into(),
            static_dir: None,
            persona: default_persona(),
            history_window: DEFAULT_HISTORY_WINDOW,
            session_snapshot: None,
        }
    }
}

pub struct AppState {
    pub pool: WorkerPool,
    pub sessions: SessionStore,
    pub feedback: FeedbackLog,
    pub persona: Vec<String>,
    pub history_window: usize,
}

impl AppState {
    pub fn new(engine: Arc<dyn Engine>, config: &ServerConfig) -> std::io::Result<Self> {
        let sessions = match &config.session_snapshot {
            Some(p) if p.exists() => SessionStore::load_snapshot(p)?,
            _ => SessionStore::new(),
        };
        Ok(Self {
            pool: WorkerPool::new(engine, config.workers, config.queue_capacity),
            sessions,
            feedback: FeedbackLog::open(&config.feedback_path)?,
            persona: config.persona.clone(),
            history_window: config.history_window,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChatRequest {
    #[serde(default)]
    pub session_id: Option<String>,
    pub message: String,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub session_id: String,
    pub turn_id: usize,
    pub reply: String,
    pub emotion: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReportRequest {
    pub session_id: String,
    pub turn_id: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EditRequest {
    pub session_id: String,
    pub turn_id: usize,
    pub revised: String,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub ok: bool,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub workers: usize,
    pub queue_depth: usize,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<PoolError> for ApiError {
    fn from(e: PoolError) -> Self {
        let status = match e {
            PoolError::QueueFull => StatusCode::SERVICE_UNAVAILABLE,
            PoolError::Engine(_) => StatusCode::INTERNAL_SERVER_ERROR,
            PoolError::Closed => StatusCode::SERVICE_UNAVAILABLE,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(serde_json::json!({ "error": self.message }));
        if self.status == StatusCode::SERVICE_UNAVAILABLE {
            (self.status, [(header::RETRY_AFTER, "1")], body).into_response()
        } else {
            (self.status, body).into_response()
        }
    }
}

type Shared = Arc<AppState>;

async fn chat(
    State(app): State<Shared>,
    Json(req): Json<ChatRequest>,
) -> Result<Json<ChatResponse>, ApiError> {
    let message = req.message.trim().to_string();
    if message.is_empty() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "message must not be empty",
        ));
    }
    let session = app
        .sessions
        .get_or_create(req.session_id.as_deref(), &app.persona);
    let history = session.history_for(&message, app.history_window);
    let reply = app
        .pool
        .run(session.persona.clone(), history.clone())
        .await?;
    let turn_id = {
        let mut map = app.sessions.lock();
        let s = map
            .get_mut(&session.session_id)
            .ok_or_else(|| ApiError::new(StatusCode::GONE, "session disappeared"))?;
        s.push_turn(message, reply.text.clone(), reply.emotion.clone(), history)
    };
    Ok(Json(ChatResponse {
        session_id: session.session_id,
        turn_id,
        reply: reply.text,
        emotion: reply.emotion,
    }))
}

/// Writes one feedback record durably, then flags the turn.
async fn record_feedback(
    app: &Shared,
    session_id: &str,
    turn_id: usize,
    revised: Option<String>,
) -> Result<Json<Ack>, ApiError> {
    let record = {
        let map = app.sessions.lock();
        let session = map.get(session_id).ok_or_else(|| {
            ApiError::new(
                StatusCode::NOT_FOUND,
                format!("unknown session `{session_id}`"),
            )
        })?;
        let turn = session.turns.get(turn_id).ok_or_else(|| {
            ApiError::new(StatusCode::NOT_FOUND, format!("unknown turn {turn_id}"))
        })?;
        FeedbackRecord {
            kind: if revised.is_some() {
                FeedbackKind::Edit
            } else {
                FeedbackKind::Report
            },
            session_id: session_id.to_string(),
            turn_id,
            persona: session.persona.clone(),
            history: turn.history.clone(),
            original_reply: turn.bot_text.clone(),
            revised_reply: revised.clone(),
            timestamp: feedback::now_millis(),
        }
    };
    let writer = Arc::clone(app);
    tokio::task::spawn_blocking(move || writer.feedback.append(&record))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| {
            ApiError::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                format!("feedback log: {e}"),
            )
        })?;
    let mut map = app.sessions.lock();
    if let Some(turn) = map
        .get_mut(session_id)
        .and_then(|s| s.turns.get_mut(turn_id))
    {
        match revised {
            Some(text) => {
                turn.flags.edited = true;
                turn.revised = Some(text);
            }
            None => turn.flags.reported = true,
        }
    }
    Ok(Json(Ack { ok: true }))
}

async fn report(
    State(app): State<Shared>,
    Json(req): Json<ReportRequest>,
) -> Result<Json<Ack>, ApiError> {
    record_feedback(&app, &req.session_id, req.turn_id, None).await
}

async fn edit(
    State(app): State<Shared>,
    Json(req): Json<EditRequest>,
) -> Result<Json<Ack>, ApiError> {
    let revised = req.revised.trim().to_string();
    if revised.is_empty() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "revised reply must not be empty",
        ));
    }
    record_feedback(&app, &req.session_id, req.turn_id, Some(revised)).await
}

async fn health(State(app): State<Shared>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        workers: app.pool.workers(),
        queue_depth: app.pool.stats().queue_depth,
    })
}

pub fn router(state: Shared, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/chat", post(chat))
        .route("/api/report", post(report))
        .route("/api/edit", post(edit))
        .route("/api/health", get(health))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until Ctrl-C, then writes the session snapshot if configured.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Shared,
    config: &ServerConfig,
) -> std::io::Result<()> {
    let app = router(Arc::clone(&state), config.static_dir.clone());
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    if let Some(path) = &config.session_snapshot {
        state.sessions.save_snapshot(path)?;
    }
    Ok(())
}
