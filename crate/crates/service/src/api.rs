//! HTTP routes under `/v1`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::profile::{ApiError, AppState};
use crate::schema::*;

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let body = ErrorResponse { error: ErrorBody { status: self.status, message: self.message } };
        (status, Json(body)).into_response()
    }
}

/// Bodies are parsed by hand so every schema violation is a 400.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

async fn expand(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<ExpandResponse>, ApiError> {
    let req: ExpandRequest = parse(&body)?;
    let profile = state.profile(&req.profile)?;
    blocking(move || profile.expand(&req)).await.map(Json)
}

async fn feedback(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<FeedbackResponse>, ApiError> {
    let req: FeedbackRequest = parse(&body)?;
    let profile = state.profile(&req.profile)?;
    blocking(move || profile.record_feedback(&req)).await.map(Json)
}

async fn train(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<TrainResponse>, ApiError> {
    let req: TrainRequest = if body.is_empty() { TrainRequest { profile: "default".into(), ..Default::default() } } else { parse(&body)? };
    let profile = state.profile(&req.profile)?;
    blocking(move || profile.train_adapter(&req)).await.map(Json)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        api: "v1".into(),
        profiles: state.profiles.values().map(|p| p.health()).collect(),
    })
}

#[derive(Deserialize)]
struct StatsQuery {
    profile: Option<String>,
}

async fn stats(State(state): State<Arc<AppState>>, Query(q): Query<StatsQuery>) -> Result<Json<StatsResponse>, ApiError> {
    let profile = state.profile(q.profile.as_deref().unwrap_or("default"))?;
    Ok(Json(profile.stats()))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/expand", post(expand))
        .route("/v1/feedback", post(feedback))
        .route("/v1/personalize/train", post(train))
        .route("/v1/health", get(health))
        .route("/v1/lexicon/stats", get(stats))
        .with_state(state)
}

/// Serves `router` on `addr` until ctrl-c.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
