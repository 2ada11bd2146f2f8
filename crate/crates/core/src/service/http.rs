// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON-over-HTTP transport for [`SessionState`].

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::json;

use super::{DriftRequest, InterpretRequest, InterveneRequest, MatchRequest, SaliencyRequest, SessionState};
use crate::edit::BUILTIN_WORDLISTS;
use crate::error::Error;
use crate::io::vocab::Vocabulary;

/// `{code, message}` body with an HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

pub fn status_for(err: &Error) -> StatusCode {
    match err {
        Error::NotFound(_) => StatusCode::NOT_FOUND,
        Error::Dimension { .. } | Error::Compatibility(_) | Error::Version { .. } | Error::TensorShape { .. } => StatusCode::CONFLICT,
        Error::Input(_) | Error::Config(_) | Error::Json(_) | Error::Format(_) | Error::Image(_) | Error::Degenerate(_) => StatusCode::BAD_REQUEST,
        Error::MissingTensor(_) | Error::Truncated(_) | Error::NonFinite(_) | Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<Error> for ApiError {
    fn from(err: Error) -> Self {
        Self {
            status: status_for(&err),
            code: err.code().into(),
            message: err.to_string(),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "malformed_body".into(),
            message: r.body_text(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"code": self.code, "message": self.message}))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Runs a handler on the blocking pool; numerics never block the reactor.
async fn blocking<T, F>(state: Arc<SessionState>, f: F) -> ApiResult<T>
where
    T: Serialize + Send + 'static,
    F: FnOnce(&SessionState) -> crate::Result<T> + Send + 'static,
{
    match tokio::task::spawn_blocking(move || f(&state)).await {
        Ok(r) => r.map(Json).map_err(ApiError::from),
        Err(e) => Err(ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal".into(),
            message: e.to_string(),
        }),
    }
}

async fn health(State(s): State<Arc<SessionState>>) -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "model": s.model_summary()}))
}

async fn model(State(s): State<Arc<SessionState>>) -> Json<super::ModelSummary> {
    Json(s.model_summary())
}

async fn list_vocabs(State(s): State<Arc<SessionState>>) -> Json<Vec<super::VocabInfo>> {
    Json(s.vocabs())
}

fn bad_multipart(msg: impl ToString) -> ApiError {
    ApiError {
        status: StatusCode::BAD_REQUEST,
        code: "malformed_body".into(),
        message: msg.to_string(),
    }
}

/// Multipart fields `id` (text, optional) and `file` (vocabulary bytes).
async fn upload_vocab(State(s): State<Arc<SessionState>>, mut mp: Multipart) -> ApiResult<super::VocabInfo> {
    let mut id = None;
    let mut bytes = None;
    while let Some(field) = mp.next_field().await.map_err(bad_multipart)? {
        match field.name() {
            Some("id") => id = Some(field.text().await.map_err(bad_multipart)?),
            _ => bytes = Some(field.bytes().await.map_err(bad_multipart)?.to_vec()),
        }
    }
    let bytes = bytes.ok_or_else(|| bad_multipart("missing vocabulary file field"))?;
    let id = id.unwrap_or_else(|| "uploaded".into());
    blocking(s, move |s| s.add_vocab(Vocabulary::from_bytes(id, &bytes)?)).await
}

/// First file field of the multipart body.
async fn upload_image(State(s): State<Arc<SessionState>>, mut mp: Multipart) -> ApiResult<super::ImageInfo> {
    let mut bytes = None;
    while let Some(field) = mp.next_field().await.map_err(bad_multipart)? {
        if bytes.is_none() {
            bytes = Some(field.bytes().await.map_err(bad_multipart)?.to_vec());
        }
    }
    let bytes = bytes.ok_or_else(|| bad_multipart("missing image field"))?;
    blocking(s, move |s| s.add_image(bytes)).await
}

async fn interpret(State(s): State<Arc<SessionState>>, body: Result<Json<InterpretRequest>, JsonRejection>) -> ApiResult<super::InterpretResponse> {
    let Json(req) = body?;
    blocking(s, move |s| s.interpret(&req)).await
}

async fn saliency(State(s): State<Arc<SessionState>>, body: Result<Json<SaliencyRequest>, JsonRejection>) -> ApiResult<super::SaliencyResponse> {
    let Json(req) = body?;
    blocking(s, move |s| s.saliency(&req)).await
}

async fn match_tokens(State(s): State<Arc<SessionState>>, body: Result<Json<MatchRequest>, JsonRejection>) -> ApiResult<super::MatchResponse> {
    let Json(req) = body?;
    blocking(s, move |s| s.match_tokens(&req)).await
}

async fn intervene(State(s): State<Arc<SessionState>>, body: Result<Json<InterveneRequest>, JsonRejection>) -> ApiResult<super::InterveneResponse> {
    let Json(req) = body?;
    blocking(s, move |s| s.intervene(&req)).await
}

async fn drift(State(s): State<Arc<SessionState>>, body: Result<Json<DriftRequest>, JsonRejection>) -> ApiResult<super::DriftInfo> {
    let Json(req) = body?;
    blocking(s, move |s| s.calibrate(&req)).await
}

async fn get_drift(State(s): State<Arc<SessionState>>) -> ApiResult<crate::interpret::DriftTable> {
    s.drift()
        .map(|t| Json((*t).clone()))
        .ok_or_else(|| Error::NotFound("no drift table loaded".into()).into())
}

async fn get_plan(State(s): State<Arc<SessionState>>, Path(id): Path<String>) -> ApiResult<crate::edit::InterventionPlan> {
    Ok(Json((*s.plan(&id)?).clone()))
}

async fn wordlists() -> Json<serde_json::Value> {
    let lists: Vec<_> = BUILTIN_WORDLISTS
        .iter()
        .map(|(name, text)| json!({"id": name, "words": text.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>()}))
        .collect();
    Json(json!(lists))
}

async fn not_found() -> ApiError {
    Error::NotFound("no such endpoint".into()).into()
}

pub fn router(state: Arc<SessionState>) -> Router {
    let limit = state.config().max_upload_bytes;
    Router::new()
        .route("/api/health", get(health))
        .route("/api/model", get(model))
        .route("/api/vocab", get(list_vocabs).post(upload_vocab))
        .route("/api/wordlists", get(wordlists))
        .route("/api/images", post(upload_image))
        .route("/api/interpret", post(interpret))
        .route("/api/saliency", post(saliency))
        .route("/api/match", post(match_tokens))
        .route("/api/intervene", post(intervene))
        .route("/api/drift", get(get_drift).post(drift))
        .route("/api/plans/{id}", get(get_plan))
        .fallback(not_found)
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, state: Arc<SessionState>) -> std::io::Result<()> {
    serve_listener(tokio::net::TcpListener::bind(addr).await?, state).await
}

/// Serves on an already bound listener until ctrl-c.
pub async fn serve_listener(listener: tokio::net::TcpListener, state: Arc<SessionState>) -> std::io::Result<()> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
