//! HTTP batch prediction.
//!
//! `POST /api/predict` takes up to `max_batch` PNG images as a multipart
//! form or as JSON with base64 payloads and returns one result per image
//! in request order. `GET /api/health` and `GET /api/labels` describe the
//! loaded model.

pub mod api;
pub mod error;
pub mod model;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::DefaultBodyLimit;
use axum::routing::{get, post};
use axum::Router;

pub use api::{Health, ItemResult, ItemStatus, Labels, PredictJson, PredictResponse};
pub use error::{ErrorBody, ServiceError};
pub use model::{model_id, LoadError, ModelBundle};

pub const DEFAULT_MAX_BATCH: usize = 50;
/// Upper bound on a request body.
pub const DEFAULT_BODY_LIMIT: usize = 256 << 20;

/// Shared, read-only state behind every handler.
#[derive(Debug)]
pub struct AppState {
    pub models: ModelBundle,
    pub max_batch: usize,
    pub started: Instant,
}

impl AppState {
    pub fn new(models: ModelBundle, max_batch: usize) -> Self {
        Self {
            models,
            max_batch,
            started: Instant::now(),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/predict", post(api::predict))
        .route("/api/health", get(api::health))
        .route("/api/labels", get(api::labels))
        .layer(DefaultBodyLimit::max(DEFAULT_BODY_LIMIT))
        .with_state(Arc::new(state))
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, model = state.models.model_id(), "listening");
    axum::serve(listener, router(state)).await
}
