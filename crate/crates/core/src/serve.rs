//! Minimal HTTP inference endpoint.
//!
//! `GET /health` reports the loaded model; `POST /predict` accepts WAV
//! (`audio/wav`) or SLF1 (`application/octet-stream`) bodies and answers
//! `{"mos": x}`. The model is immutable and shared across requests.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tokio::net::TcpListener;

use crate::features::CepstralConfig;
use crate::inference::{predict_feature_bytes, predict_wav, InferenceError};
use crate::model::SalfModel;

const BODY_LIMIT: usize = 64 << 20;

struct AppState {
    model: SalfModel,
    cepstral: CepstralConfig,
}

pub fn router(model: SalfModel) -> Router {
    let state = Arc::new(AppState {
        model,
        cepstral: CepstralConfig::default(),
    });
    Router::new()
        .route("/health", get(health))
        .route("/predict", post(predict))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// Serves on an already bound listener until the task is dropped.
pub async fn serve_on(listener: TcpListener, model: SalfModel) -> std::io::Result<()> {
    axum::serve(listener, router(model)).await
}

pub async fn serve(bind: SocketAddr, model: SalfModel) -> std::io::Result<()> {
    let listener = TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    serve_on(listener, model).await
}

async fn health(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let m = &st.model;
    let cfg = m.config();
    Json(json!({
        "status": "ok",
        "depth": cfg.depth,
        "input_dim": cfg.input_dim,
        "channels": cfg.channels,
        "lfe_dim": cfg.lfe_dim,
        "feature_kind": m.feature_kind().name(),
        "feature_dim": m.feature_dim(),
        "params": m.num_params(),
    }))
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

async fn predict(State(st): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    let ctype = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.split(';').next())
        .map(|v| v.trim().to_ascii_lowercase())
        .unwrap_or_default();
    let result = match ctype.as_str() {
        "audio/wav" | "audio/x-wav" | "audio/wave" | "audio/vnd.wave" => predict_wav(&st.model, &body, &st.cepstral),
        "application/octet-stream" => predict_feature_bytes(&st.model, &body),
        "" => return error(StatusCode::BAD_REQUEST, "missing content-type"),
        other => return error(StatusCode::BAD_REQUEST, format!("unsupported content-type {other}")),
    };
    match result {
        Ok(mos) => Json(json!({ "mos": mos })).into_response(),
        Err(e @ InferenceError::Malformed(_)) => error(StatusCode::BAD_REQUEST, e.to_string()),
        Err(e @ InferenceError::KindMismatch(_)) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        Err(e @ InferenceError::Internal(_)) => {
            log::error!("prediction failed: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
        }
    }
}
