//! JSON API over an [`AnnotationStore`].

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sessionseg::corpus::write_annotations_to;
use tower_http::services::ServeDir;

use crate::store::{AnnotationStore, ExportPolicy, SessionPayload, StoreError};

pub struct AppState {
    pub store: Mutex<AnnotationStore>,
    /// token -> annotator id
    pub tokens: HashMap<String, String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match e {
            StoreError::UnknownSession(_) | StoreError::Empty => StatusCode::NOT_FOUND,
            StoreError::Validation(_) => StatusCode::BAD_REQUEST,
            StoreError::Conflict { .. } => StatusCode::CONFLICT,
            StoreError::Corrupt { .. } | StoreError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Resolves the annotator from `Authorization: Bearer <token>` or a `token`
/// query parameter.
fn authenticate(state: &AppState, headers: &HeaderMap, query_token: Option<&str>) -> ApiResult<String> {
    let bearer = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim);
    let token = bearer.or(query_token).ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "missing token"))?;
    state.tokens.get(token).cloned().ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unknown token"))
}

fn lock(state: &AppState) -> std::sync::MutexGuard<'_, AnnotationStore> {
    state.store.lock().unwrap_or_else(|p| p.into_inner())
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: Option<String>,
    token: Option<String>,
}

#[derive(Serialize, Deserialize)]
pub struct NextResponse {
    pub session: Option<SessionPayload>,
}

async fn next_session(State(state): State<Arc<AppState>>, headers: HeaderMap, Query(q): Query<NextQuery>) -> ApiResult<Json<NextResponse>> {
    let who = authenticate(&state, &headers, q.token.as_deref())?;
    let annotator = q.annotator.ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing annotator parameter"))?;
    if annotator != who {
        return Err(ApiError::new(StatusCode::UNAUTHORIZED, format!("token does not belong to annotator `{annotator}`")));
    }
    Ok(Json(NextResponse { session: lock(&state).next_unlabeled(&annotator) }))
}

#[derive(Deserialize)]
pub struct SubmitBody {
    pub gap_labels: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
pub struct SubmitAck {
    pub record_id: u64,
}

#[derive(Deserialize)]
struct TokenQuery {
    token: Option<String>,
    policy: Option<String>,
}

async fn submit_labels(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(session_id): Path<String>,
    Query(q): Query<TokenQuery>,
    body: Result<Json<SubmitBody>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Json<SubmitAck>> {
    let who = authenticate(&state, &headers, q.token.as_deref())?;
    let Json(body) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    let record = lock(&state).submit(&session_id, &who, body.gap_labels)?;
    Ok(Json(SubmitAck { record_id: record.record_id }))
}

async fn progress(State(state): State<Arc<AppState>>, headers: HeaderMap, Query(q): Query<TokenQuery>) -> ApiResult<Response> {
    authenticate(&state, &headers, q.token.as_deref())?;
    Ok(Json(lock(&state).progress()).into_response())
}

async fn export(State(state): State<Arc<AppState>>, headers: HeaderMap, Query(q): Query<TokenQuery>) -> ApiResult<Response> {
    authenticate(&state, &headers, q.token.as_deref())?;
    let policy: ExportPolicy = match q.policy.as_deref() {
        None => ExportPolicy::default(),
        Some(p) => p.parse().map_err(|m: String| ApiError::new(StatusCode::BAD_REQUEST, m))?,
    };
    let rows = lock(&state).export(policy)?;
    let mut body = Vec::new();
    write_annotations_to(&mut body, &rows).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

pub fn router(state: Arc<AppState>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/session/next", get(next_session))
        .route("/api/session/{id}/labels", post(submit_labels))
        .route("/api/progress", get(progress))
        .route("/api/export", get(export))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}
