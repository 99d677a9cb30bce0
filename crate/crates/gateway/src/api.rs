//! Review HTTP API.
//!
//! Decisions are serialized through one lock around the pipeline, so the
//! second of two concurrent decisions on a task sees the first and gets 409.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lemon_core::frames::{FrameEncoding, StoreError};
use lemon_core::pipeline::{Pipeline, PipelineError};
use lemon_core::review::{DecisionRequest, ReviewError, ReviewTask, TaskKind, TaskStatus};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub struct AppState {
    pub pipeline: Mutex<Pipeline>,
    pub token: Option<String>,
}

pub type Shared = Arc<AppState>;

pub fn state(pipeline: Pipeline, token: Option<String>) -> Shared {
    Arc::new(AppState {
        pipeline: Mutex::new(pipeline),
        token,
    })
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    task: Option<ReviewTask>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            task: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"error": self.message});
        if let Some(t) = self.task {
            body["task"] = serde_json::to_value(t).expect("task serializes");
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::Review(ReviewError::NotFound(_)) | PipelineError::UnknownVideo(_) => StatusCode::NOT_FOUND,
            PipelineError::Review(ReviewError::Conflict { .. }) | PipelineError::Manifest(_) => StatusCode::CONFLICT,
            PipelineError::Review(ReviewError::Invalid(_)) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

fn lock(state: &AppState) -> std::sync::MutexGuard<'_, Pipeline> {
    state.pipeline.lock().unwrap_or_else(|p| p.into_inner())
}

#[derive(Debug, Deserialize)]
pub struct QueueParams {
    kind: Option<String>,
    status: Option<String>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct TaskSummary {
    pub task_id: String,
    pub kind: TaskKind,
    pub video_id: String,
    pub created_at: u64,
    pub status: TaskStatus,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueueResponse {
    pub tasks: Vec<TaskSummary>,
    /// Pending tasks per kind.
    pub counts: BTreeMap<String, usize>,
}

/// `GET /api/queue?kind=&status=`; status defaults to `pending`, `any` lists all.
async fn queue(State(s): State<Shared>, Query(q): Query<QueueParams>) -> Result<Json<QueueResponse>, ApiError> {
    let kind = match q.kind.as_deref().filter(|k| !k.is_empty()) {
        None => None,
        Some(k) => Some(TaskKind::parse(k).ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, format!("unknown kind {k:?}")))?),
    };
    let status = match q.status.as_deref().filter(|k| !k.is_empty()) {
        None => Some(TaskStatus::Pending),
        Some("any") => None,
        Some(st) => Some(
            TaskStatus::parse(st).ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, format!("unknown status {st:?}")))?,
        ),
    };
    let p = lock(&s);
    let tasks = p
        .tasks()
        .queue(kind, status)
        .into_iter()
        .map(|t| TaskSummary {
            task_id: t.task_id.clone(),
            kind: t.kind,
            video_id: t.video_id.clone(),
            created_at: t.created_at,
            status: t.status,
        })
        .collect();
    let counts = TaskKind::ALL
        .iter()
        .map(|k| (k.as_str().to_string(), p.tasks().queue(Some(*k), Some(TaskStatus::Pending)).len()))
        .collect();
    Ok(Json(QueueResponse { tasks, counts }))
}

async fn task(State(s): State<Shared>, Path(id): Path<String>) -> Result<Json<ReviewTask>, ApiError> {
    lock(&s)
        .tasks()
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("task {id} not found")))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DecisionResponse {
    pub task: ReviewTask,
    pub replayed: bool,
}

async fn decision(
    State(s): State<Shared>,
    Path(id): Path<String>,
    body: Result<Json<DecisionRequest>, JsonRejection>,
) -> Result<Json<DecisionResponse>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    let s2 = s.clone();
    let result = tokio::task::spawn_blocking(move || {
        let mut p = lock(&s2);
        let out = p.decide(&id, &req);
        let current = p.tasks().get(&id).cloned();
        (out, current)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    match result {
        (Ok(d), _) => Ok(Json(DecisionResponse {
            task: d.task,
            replayed: d.replayed,
        })),
        (Err(e), current) => {
            let conflict = matches!(e, PipelineError::Review(ReviewError::Conflict { .. }));
            let mut err = ApiError::from(e);
            if conflict {
                err.task = current;
            }
            Err(err)
        }
    }
}

fn image_response(bytes: Vec<u8>, encoding: FrameEncoding) -> Response {
    let mime = match encoding {
        FrameEncoding::Png => "image/png",
        FrameEncoding::Jpeg { .. } => "image/jpeg",
    };
    let mut resp = Response::new(Body::from(bytes));
    resp.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static(mime));
    resp
}

/// `GET /api/frames/{video_id}/{index:08}`.
async fn frame(State(s): State<Shared>, Path(key): Path<String>) -> Result<Response, ApiError> {
    let p = lock(&s);
    match p.frames().get_key(&key) {
        Ok(bytes) => Ok(image_response(bytes, p.frames().encoding())),
        Err(StoreError::NotFound(k)) => Err(ApiError::new(StatusCode::NOT_FOUND, format!("frame {k} not found"))),
        Err(StoreError::InvalidKey(k)) => Err(ApiError::new(StatusCode::BAD_REQUEST, format!("invalid frame key {k:?}"))),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    }
}

async fn storyboard(State(s): State<Shared>, Path(video_id): Path<String>) -> Result<Response, ApiError> {
    if lemon_core::frames::validate_video_id(&video_id).is_err() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid video id"));
    }
    let path = lock(&s)
        .storyboard_path(&video_id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no storyboard for {video_id}")))?;
    let bytes = tokio::fs::read(path)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(image_response(bytes, FrameEncoding::Png))
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({"ok": true}))
}

async fn require_token(State(s): State<Shared>, req: Request, next: Next) -> Response {
    if let Some(token) = &s.token {
        let expected = format!("Bearer {token}");
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v == expected);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/tasks/{id}", get(task))
        .route("/api/tasks/{id}/decision", post(decision))
        .route("/api/frames/{*key}", get(frame))
        .route("/api/storyboards/{video_id}", get(storyboard))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .route("/api/health", get(health))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: Shared) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
