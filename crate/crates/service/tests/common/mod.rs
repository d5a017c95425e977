#![allow(dead_code)]

use std::sync::Arc;

use animator_core::attention::AttentionMode;
use animator_core::backbone::DenoiserConfig;
use animator_core::canvas::InstanceImage;
use animator_core::codec::Frame;
use animator_core::encoders::EncoderConfig;
use animator_core::imageio::encode_png;
use animator_core::{ColorizationModel, ModelConfig};
use animator_service::api::encode_base64;
use animator_service::{router, AppState, Engine};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use candle_core::DType;
use http_body_util::BodyExt;
use ndarray::{Array2, Array3};
use serde_json::{json, Value};
use tower::ServiceExt;

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        factor: 4,
        denoiser: DenoiserConfig {
            hidden: 16,
            blocks: 2,
            heads: 2,
            patch: 1,
            attention_mode: AttentionMode::Unified,
        },
        encoders: EncoderConfig {
            image_dim: 8,
            image_tokens: 2,
            text_dim: 8,
            text_max_tokens: 8,
            heads: 2,
            patch: 4,
        },
        ..ModelConfig::default()
    }
}

/// A micro model whose parameters are all non-zero, so every input matters.
pub fn micro_engine() -> Arc<Engine> {
    let model = ColorizationModel::new(micro_config(), 11, DType::F32).unwrap();
    for (i, name) in model.store.names().into_iter().enumerate() {
        let n = model.store.values(&name).unwrap().len();
        let v: Vec<f64> = if name.starts_with("control.") {
            vec![1.0; n]
        } else {
            (0..n).map(|k| (((k * 7 + i * 13) % 17) as f64 / 17.0 - 0.5) * 0.6).collect()
        };
        model.store.set_values(&name, &v).unwrap();
    }
    Arc::new(Engine::new(model, "micro-test"))
}

pub fn app(engine: Arc<Engine>) -> axum::Router {
    router(AppState {
        engine,
        data_root: std::env::temp_dir(),
    })
}

pub fn solid(h: usize, w: usize, color: [f32; 3]) -> Frame {
    Array3::from_shape_fn((h, w, 3), |(_, _, c)| color[c])
}

pub fn png_b64(frame: &Frame) -> String {
    encode_base64(&encode_png(frame).unwrap())
}

pub fn instance(color: [f32; 3]) -> InstanceImage {
    InstanceImage::with_mask(solid(4, 4, color), Array2::from_elem((4, 4), true)).unwrap()
}

pub const PALETTE: [[f32; 3]; 4] = [[1.0, 0.0, 0.0], [0.0, 0.8, 0.2], [0.2, 0.2, 1.0], [1.0, 1.0, 0.0]];

/// An 8×8, two-frame request with `n` inline square instances.
pub fn infer_request(n: usize, seed: u64, w_text: Option<f64>) -> Value {
    let sketch = Array3::from_shape_fn((8, 8, 3), |(y, x, _)| if x == 2 || y == 5 { 0.0 } else { 1.0 });
    let placements: Vec<Value> = (0..n)
        .map(|i| json!({"instance_id": format!("i{i}"), "x": (i * 2) as i32, "y": i as i32, "scale": 0.5, "z_order": i as i32}))
        .collect();
    let instances: Vec<Value> = (0..n)
        .map(|i| json!({"id": format!("i{i}"), "png": png_b64(&solid(4, 4, PALETTE[i % 4]))}))
        .collect();
    let mut overrides = json!({});
    if let Some(w) = w_text {
        overrides["w_text"] = json!(w);
    }
    json!({
        "canvas": {"width": 8, "height": 8, "placements": placements},
        "sketches": {"frames": [png_b64(&sketch), png_b64(&sketch)]},
        "caption": "Location: the red square is at the center.",
        "weight_overrides": overrides,
        "seed": seed,
        "steps": 3,
        "instances": instances,
        "background_png": png_b64(&solid(8, 8, [0.9, 0.9, 0.8]))
    })
}

pub async fn send(app: &axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub async fn get(app: &axum::Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

pub async fn post_json(app: &axum::Router, uri: &str, body: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    send(app, req).await
}

/// Multipart body with one part per `(name, bytes)`.
pub fn multipart(parts: &[(&str, Vec<u8>)]) -> (String, Vec<u8>) {
    let boundary = "----animator-test-boundary".to_string();
    let mut body = Vec::new();
    for (name, bytes) in parts {
        body.extend(format!("--{boundary}\r\nContent-Disposition: form-data; name=\"{name}\"; filename=\"{name}.png\"\r\nContent-Type: image/png\r\n\r\n").as_bytes());
        body.extend(bytes);
        body.extend(b"\r\n");
    }
    body.extend(format!("--{boundary}--\r\n").as_bytes());
    (format!("multipart/form-data; boundary={boundary}"), body)
}

pub async fn upload(app: &axum::Router, parts: &[(&str, Vec<u8>)]) -> (StatusCode, Vec<u8>) {
    let (ct, body) = multipart(parts);
    let req = Request::post("/instances").header("content-type", ct).body(Body::from(body)).unwrap();
    send(app, req).await
}
