//! HTTP routes over a shared, read-only [`Engine`].

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use animator_core::canvas::{compose, InstanceSet};
use animator_core::imageio::encode_png;
use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::value::RawValue;

use crate::api::{
    decode_inline_instances, decode_instance, decode_job, encode_frames, parse_document, resolve_canvas,
    ComposeRequest, ErrorBody, Health, InferRequest, InferResponse, InstanceCreated, Timing,
};
use crate::engine::{resolve_instances, Engine, Rejection};

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    /// Base directory for relative paths inside request documents.
    pub data_root: PathBuf,
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(Rejection),
    Internal(String),
}

impl From<Rejection> for ApiError {
    fn from(r: Rejection) -> Self {
        ApiError::BadRequest(r)
    }
}

impl ApiError {
    fn internal(err: impl std::fmt::Display) -> Self {
        let id = uuid::Uuid::new_v4().to_string();
        tracing::error!(error_id = %id, "request failed: {err}");
        ApiError::Internal(id)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        match self {
            ApiError::BadRequest(r) => {
                let body = ErrorBody {
                    error: r.message,
                    path: r.path,
                    id: None,
                };
                (StatusCode::BAD_REQUEST, Json(body)).into_response()
            }
            ApiError::Internal(id) => {
                let body = ErrorBody {
                    error: "internal error".into(),
                    path: None,
                    id: Some(id),
                };
                (StatusCode::INTERNAL_SERVER_ERROR, Json(body)).into_response()
            }
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/weights", get(weights))
        .route("/instances", post(upload_instance))
        .route("/infer", post(infer))
        .route("/compose", post(compose_canvas))
        .layer(DefaultBodyLimit::max(64 * 1024 * 1024))
        .with_state(state)
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        model_version: state.engine.version.clone(),
    })
}

async fn weights(State(state): State<AppState>) -> Result<Response, ApiError> {
    let w = state.engine.default_weights().map_err(ApiError::internal)?;
    Ok(Json(w).into_response())
}

/// Multipart upload: an `image` PNG part and an optional `mask` PNG part.
async fn upload_instance(State(state): State<AppState>, mut form: Multipart) -> Result<Json<InstanceCreated>, ApiError> {
    let (mut png, mut mask) = (None, None);
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| Rejection::new("multipart", e.to_string()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field
            .bytes()
            .await
            .map_err(|e| Rejection::new(name.clone(), e.to_string()))?;
        match name.as_str() {
            "image" => png = Some(bytes),
            "mask" => mask = Some(bytes),
            other => return Err(Rejection::new(other, "unexpected multipart field").into()),
        }
    }
    let png = png.ok_or_else(|| Rejection::new("image", "missing PNG part"))?;
    let image = decode_instance(&png, mask.as_deref()).map_err(|e| Rejection::new("image", e.to_string()))?;
    let (height, width) = (image.height(), image.width());
    let instance_id = state.engine.store.register(image);
    Ok(Json(InstanceCreated {
        instance_id,
        width,
        height,
    }))
}

async fn infer(State(state): State<AppState>, body: String) -> Result<Response, ApiError> {
    let raw: Box<RawValue> = parse_document(&body)?;
    let req: InferRequest = parse_document(raw.get())?;
    let engine = state.engine.clone();
    let root = state.data_root.clone();
    let work = move || -> Result<InferResponse, ApiError> {
        let start = Instant::now();
        let job = decode_job(&req, &root)?;
        let inline = decode_inline_instances(&req.instances, "instances")?;
        let instances: InstanceSet = resolve_instances(&job.canvas, |id| {
            inline
                .iter()
                .find(|(i, _)| i == id)
                .map(|(_, img)| img.clone())
                .or_else(|| engine.store.get(id))
        })?;
        engine.check(&job, &instances)?;
        let instance_order = instances.iter().map(|i| i.id.clone()).collect();
        let decoded = Instant::now();
        let video = engine.run(&job, instances).map_err(ApiError::internal)?;
        let sampled = Instant::now();
        Ok(InferResponse {
            model_version: engine.version.clone(),
            frame_count: video.frames(),
            width: video.width(),
            height: video.height(),
            frames: encode_frames(&video).map_err(ApiError::internal)?,
            instance_order,
            timing: Timing {
                decode_ms: (decoded - start).as_secs_f64() * 1e3,
                sample_ms: (sampled - decoded).as_secs_f64() * 1e3,
            },
            request: raw,
        })
    };
    let response = tokio::task::spawn_blocking(work)
        .await
        .map_err(ApiError::internal)??;
    Ok(Json(response).into_response())
}

/// Paints the canvas exactly as the model sees it and returns it as PNG.
async fn compose_canvas(State(state): State<AppState>, body: String) -> Result<Response, ApiError> {
    let req: ComposeRequest = parse_document(&body)?;
    let canvas = resolve_canvas(req.canvas, req.background_png.as_deref(), &state.data_root)?;
    canvas
        .validate(1)
        .map_err(|e| Rejection::new("canvas", e.to_string()))?;
    let inline = decode_inline_instances(&req.instances, "instances")?;
    let instances = resolve_instances(&canvas, |id| {
        inline
            .iter()
            .find(|(i, _)| i == id)
            .map(|(_, img)| img.clone())
            .or_else(|| state.engine.store.get(id))
    })?;
    let frame = compose(&canvas, &instances).map_err(|e| Rejection::new("canvas", e.to_string()))?;
    let png = encode_png(&frame).map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

/// Binds and serves until ctrl-c.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
