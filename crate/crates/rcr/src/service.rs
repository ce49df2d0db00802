//! HTTP front end for [`Engine`].

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;

use crate::session::{CreateRequest, Engine, FeedbackRequest, SessionError};

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

struct ApiError(StatusCode, ErrorBody);

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match e {
            SessionError::UnknownModel(_) | SessionError::UnknownSession(_) => StatusCode::NOT_FOUND,
            SessionError::Inactive(..) => StatusCode::CONFLICT,
            SessionError::Unmappable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::BadRequest(_) => StatusCode::BAD_REQUEST,
            SessionError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(
            status,
            ErrorBody {
                error: e.code(),
                message: e.to_string(),
            },
        )
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(
            StatusCode::BAD_REQUEST,
            ErrorBody {
                error: "bad_request",
                message: e.body_text(),
            },
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/models", get(models))
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(show).delete(end))
        .route("/sessions/{id}/feedback", post(feedback))
        .with_state(engine)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn models(State(engine): State<Arc<Engine>>) -> impl IntoResponse {
    Json(engine.models())
}

async fn create(State(engine): State<Arc<Engine>>, body: Result<Json<CreateRequest>, JsonRejection>) -> ApiResult<Response> {
    let Json(req) = body?;
    let out = engine.create(&req)?;
    Ok((StatusCode::CREATED, Json(out)).into_response())
}

async fn feedback(
    State(engine): State<Arc<Engine>>,
    Path(id): Path<String>,
    body: Result<Json<FeedbackRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = body?;
    Ok(Json(engine.feedback(&id, &req)?).into_response())
}

async fn show(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(engine.get(&id)?).into_response())
}

async fn end(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(engine.end(&id)?).into_response())
}
