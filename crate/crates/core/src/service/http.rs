//! HTTP API.
//!
//! | method | path | body / reply |
//! |---|---|---|
//! | POST | `/v1/sessions` | → `{"session_id"}` |
//! | GET | `/v1/sessions` | → `{"sessions": [..]}` |
//! | POST | `/v1/sessions/{id}/messages` | `{"text", "resources"?: [{"name", "data_base64"}]}` → trace |
//! | GET | `/v1/sessions/{id}/traces/{n}` | → trace |
//! | GET | `/v1/artifacts/{session}/{file}` | → file bytes |
//!
//! Errors reply `{"error": {"code", "message"}}`.

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::Deserialize;
use serde_json::json;
use tracing::error;

use super::{Attachment, Service, ServiceError};

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::UnknownSession(_) | ServiceError::UnknownTrace { .. } | ServiceError::UnknownArtifact(_) => {
                StatusCode::NOT_FOUND
            }
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Backend(_) => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Config(_) | ServiceError::Storage(_) | ServiceError::Internal(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownSession(_) => "unknown_session",
            ServiceError::UnknownTrace { .. } => "unknown_trace",
            ServiceError::UnknownArtifact(_) => "unknown_artifact",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::Backend(_) => "backend_unavailable",
            ServiceError::Config(_) => "config",
            ServiceError::Storage(_) => "storage",
            ServiceError::Internal(_) => "internal",
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            error!(error = %self, "request failed");
        }
        let body = json!({"error": {"code": self.code(), "message": self.to_string()}});
        (status, Json(body)).into_response()
    }
}

#[derive(Debug, Deserialize)]
struct UploadedResource {
    name: String,
    data_base64: String,
}

#[derive(Debug, Deserialize)]
struct MessageBody {
    text: String,
    #[serde(default)]
    resources: Vec<UploadedResource>,
}

type AppState = State<Arc<Service>>;

async fn create_session(State(svc): AppState) -> Result<impl IntoResponse, ServiceError> {
    let id = svc.create_session()?;
    Ok((StatusCode::CREATED, Json(json!({"session_id": id}))))
}

async fn list_sessions(State(svc): AppState) -> impl IntoResponse {
    Json(json!({"sessions": svc.list_sessions()}))
}

async fn post_message(
    State(svc): AppState,
    Path(id): Path<String>,
    Json(body): Json<MessageBody>,
) -> Result<impl IntoResponse, ServiceError> {
    let mut attachments = Vec::with_capacity(body.resources.len());
    for r in body.resources {
        let data = base64::engine::general_purpose::STANDARD
            .decode(r.data_base64.as_bytes())
            .map_err(|e| ServiceError::BadRequest(format!("resource {:?}: {e}", r.name)))?;
        attachments.push(Attachment { name: r.name, data });
    }
    let trace = svc.handle_request(&id, &body.text, attachments).await?;
    Ok(Json(trace))
}

async fn get_trace(
    State(svc): AppState,
    Path((id, n)): Path<(String, usize)>,
) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(svc.get_trace(&id, n).await?))
}

fn content_type(file: &str) -> &'static str {
    match file
        .rsplit('.')
        .next()
        .unwrap_or_default()
        .to_ascii_lowercase()
        .as_str()
    {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "gif" => "image/gif",
        "wav" => "audio/wav",
        "mp3" => "audio/mpeg",
        "mp4" => "video/mp4",
        "txt" => "text/plain; charset=utf-8",
        "json" => "application/json",
        _ => "application/octet-stream",
    }
}

async fn get_artifact(
    State(svc): AppState,
    Path((session, file)): Path<(String, String)>,
) -> Result<impl IntoResponse, ServiceError> {
    let path = svc.artifact_path(&session, &file)?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ServiceError::Storage(format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, content_type(&file))], bytes))
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session).get(list_sessions))
        .route("/v1/sessions/{id}/messages", post(post_message))
        .route("/v1/sessions/{id}/traces/{n}", get(get_trace))
        .route("/v1/artifacts/{session}/{file}", get(get_artifact))
        .with_state(service)
}

/// Serves the API on `listener` until the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener, service: Arc<Service>) -> std::io::Result<()> {
    axum::serve(listener, router(service)).await
}
