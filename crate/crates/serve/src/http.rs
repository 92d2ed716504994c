use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::net::TcpListener;
use tower_http::cors::CorsLayer;

use crate::api::*;
use crate::engine::Engine;
use crate::error::{ServeError, ServeResult};

/// Shared handler state; `None` until a checkpoint is loaded.
#[derive(Clone)]
pub struct AppState {
    pub engine: Option<Arc<Engine>>,
}

pub fn router(engine: Option<Arc<Engine>>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/generate", post(generate))
        .route("/grid", post(grid))
        .route("/interpolate", post(interpolate))
        .layer(CorsLayer::permissive())
        .with_state(AppState { engine })
}

/// Serves until the listener fails or the process is interrupted.
pub async fn serve(listener: TcpListener, engine: Option<Arc<Engine>>) -> std::io::Result<()> {
    axum::serve(listener, router(engine)).with_graceful_shutdown(shutdown()).await
}

async fn shutdown() {
    let _ = tokio::signal::ctrl_c().await;
}

async fn healthz(State(state): State<AppState>) -> (StatusCode, Json<Health>) {
    match &state.engine {
        Some(e) => (
            StatusCode::OK,
            Json(Health {
                status: "ok".into(),
                checkpoint_id: Some(e.checkpoint_id().to_string()),
                backbone_id: Some(e.backbone_id()),
            }),
        ),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(Health { status: "no checkpoint".into(), checkpoint_id: None, backbone_id: None }),
        ),
    }
}

/// Runs `f` on the blocking pool against the loaded engine.
async fn run<Req, Resp>(
    state: AppState,
    body: Result<Json<Req>, JsonRejection>,
    f: fn(&Engine, &Req) -> ServeResult<Resp>,
) -> ServeResult<Json<Resp>>
where
    Req: Send + 'static,
    Resp: Send + 'static,
{
    let engine = state.engine.ok_or(ServeError::Unavailable)?;
    let Json(req) = body.map_err(|e| ServeError::BadRequest(e.body_text()))?;
    tokio::task::spawn_blocking(move || f(&engine, &req))
        .await
        .map_err(|e| ServeError::Worker(e.to_string()))?
        .map(Json)
}

async fn generate(
    State(state): State<AppState>,
    body: Result<Json<GenerateRequest>, JsonRejection>,
) -> ServeResult<Json<GenerateResponse>> {
    run(state, body, Engine::generate).await
}

async fn grid(
    State(state): State<AppState>,
    body: Result<Json<GridRequest>, JsonRejection>,
) -> ServeResult<Json<GridResponse>> {
    run(state, body, Engine::grid).await
}

async fn interpolate(
    State(state): State<AppState>,
    body: Result<Json<InterpolateRequest>, JsonRejection>,
) -> ServeResult<Json<InterpolateResponse>> {
    run(state, body, Engine::interpolate).await
}
