//! HTTP inference service.
//!
//! | method | path          | body                                   |
//! |--------|---------------|----------------------------------------|
//! | GET    | `/healthz`    |                                        |
//! | GET    | `/attributes` |                                        |
//! | POST   | `/edit`       | `{"image", "diff" \| "source"+"target", "intensity"?}` |
//!
//! Images travel as base64 PNG. Every response, errors included, carries the
//! checkpoint id in its JSON body and in the `x-checkpoint-id` header. The
//! model is an immutable snapshot shared by all requests.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::ServeConfig;
use crate::model::{encode_png, invalid, EditModel, EditSpec, RequestError};

pub const API_VERSION: u32 = 1;
pub const CHECKPOINT_HEADER: &str = "x-checkpoint-id";

struct AppState {
    model: Arc<EditModel>,
    max_intensity: f32,
}

#[derive(Serialize)]
struct Probability<'a> {
    attribute: &'a str,
    probability: f32,
}

fn error_response(state: &AppState, status: StatusCode, kind: &str, field: Option<&str>, message: &str) -> Response {
    let body = json!({
        "error": kind,
        "field": field,
        "message": message,
        "checkpoint_id": state.model.checkpoint_id,
    });
    (status, Json(body)).into_response()
}

impl AppState {
    fn reject(&self, e: RequestError) -> Response {
        match e {
            RequestError::Invalid { field, message } => {
                error_response(self, StatusCode::BAD_REQUEST, "invalid_request", Some(field), &message)
            }
            RequestError::TooLarge(m) => error_response(self, StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", Some("image"), &m),
            RequestError::Model(e) => {
                log::error!("edit failed: {e}");
                error_response(self, StatusCode::INTERNAL_SERVER_ERROR, e.kind(), None, &e.to_string())
            }
        }
    }
}

async fn healthz(State(s): State<Arc<AppState>>) -> Response {
    Json(json!({"status": "ok", "checkpoint_id": s.model.checkpoint_id})).into_response()
}

async fn attributes(State(s): State<Arc<AppState>>) -> Response {
    let m = &s.model;
    let cfg = &m.gen.config;
    Json(json!({
        "api_version": API_VERSION,
        "checkpoint_id": m.checkpoint_id,
        "attributes": m.attribute_names,
        "num_attributes": m.num_attributes(),
        "image_size": cfg.image_size,
        "iteration": m.iteration,
        "model": {
            "stu_variant": cfg.stu_variant.name(),
            "skip_mode": cfg.skip_mode.name(),
            "conditioning": cfg.conditioning,
            "width": cfg.width,
        },
        "intensity": {"default": 1.0, "max": s.max_intensity},
    }))
    .into_response()
}

fn vector(obj: &Map<String, Value>, field: &'static str) -> Result<Option<Vec<f32>>, RequestError> {
    let Some(v) = obj.get(field) else { return Ok(None) };
    if v.is_null() {
        return Ok(None);
    }
    let arr = v.as_array().ok_or_else(|| invalid(field, "must be an array of numbers"))?;
    arr.iter()
        .enumerate()
        .map(|(i, x)| {
            x.as_f64()
                .map(|f| f as f32)
                .ok_or_else(|| invalid(field, format!("element {i} is not a number")))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

/// Field-by-field parse of an edit request body.
fn parse_edit(body: &[u8], max_intensity: f32) -> Result<(Vec<u8>, EditSpec, f32), RequestError> {
    let v: Value = serde_json::from_slice(body).map_err(|e| invalid("body", format!("not valid JSON: {e}")))?;
    let obj = v.as_object().ok_or_else(|| invalid("body", "must be a JSON object"))?;
    for key in obj.keys() {
        if !["image", "diff", "source", "target", "intensity"].contains(&key.as_str()) {
            return Err(invalid("body", format!("unknown field {key:?}")));
        }
    }
    let image = obj
        .get("image")
        .ok_or_else(|| invalid("image", "missing"))?
        .as_str()
        .ok_or_else(|| invalid("image", "must be a base64 string"))?;
    let png = B64.decode(image).map_err(|e| invalid("image", format!("invalid base64: {e}")))?;
    let spec = match (vector(obj, "diff")?, vector(obj, "source")?, vector(obj, "target")?) {
        (Some(d), None, None) => EditSpec::Diff(d),
        (None, Some(source), Some(target)) => EditSpec::Pair { source, target },
        (None, Some(_), None) => return Err(invalid("target", "required together with source")),
        (None, None, Some(_)) => return Err(invalid("source", "required together with target")),
        (None, None, None) => return Err(invalid("diff", "supply either diff or source and target")),
        (Some(_), _, _) => return Err(invalid("diff", "supply either diff or source and target, not both")),
    };
    let intensity = match obj.get("intensity") {
        None | Some(Value::Null) => 1.0,
        Some(x) => x.as_f64().ok_or_else(|| invalid("intensity", "must be a number"))? as f32,
    };
    if !(intensity.is_finite() && intensity.abs() <= max_intensity) {
        return Err(invalid("intensity", format!("must lie within [-{max_intensity}, {max_intensity}]")));
    }
    Ok((png, spec, intensity))
}

async fn edit(State(s): State<Arc<AppState>>, body: Result<Bytes, BytesRejection>) -> Response {
    let body = match body {
        Ok(b) => b,
        Err(r) if r.status() == StatusCode::PAYLOAD_TOO_LARGE => {
            return s.reject(RequestError::TooLarge(format!("request body exceeds the limit: {}", r.body_text())));
        }
        Err(r) => return s.reject(invalid("body", r.body_text())),
    };
    let state = s.clone();
    let result = tokio::task::spawn_blocking(move || -> Result<Value, RequestError> {
        let (png, spec, intensity) = parse_edit(&body, state.max_intensity)?;
        let model = &state.model;
        let img = model.decode_png(&png)?;
        let out = model.edit(&img, &spec, intensity)?;
        let probabilities: Vec<_> = model
            .attribute_names
            .iter()
            .zip(&out.probabilities)
            .map(|(a, &p)| Probability { attribute: a, probability: p })
            .collect();
        Ok(json!({
            "checkpoint_id": model.checkpoint_id,
            "image": B64.encode(encode_png(&out.image)?),
            "probabilities": probabilities,
            "condition": out.condition,
            "intensity": intensity,
        }))
    })
    .await;
    match result {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => s.reject(e),
        Err(e) => error_response(&s, StatusCode::INTERNAL_SERVER_ERROR, "internal", None, &e.to_string()),
    }
}

async fn not_found(State(s): State<Arc<AppState>>) -> Response {
    error_response(&s, StatusCode::NOT_FOUND, "not_found", None, "no such endpoint")
}

pub fn router(model: Arc<EditModel>, cfg: &ServeConfig) -> Router {
    let header = HeaderValue::from_str(&model.checkpoint_id).expect("hex id is a valid header");
    let state = Arc::new(AppState {
        model,
        max_intensity: cfg.max_intensity,
    });
    Router::new()
        .route("/healthz", get(healthz))
        .route("/attributes", get(attributes))
        .route("/edit", post(edit))
        .fallback(not_found)
        .layer(DefaultBodyLimit::max(cfg.max_body_bytes))
        .layer(axum::middleware::map_response(move |mut r: Response| {
            let header = header.clone();
            async move {
                r.headers_mut().insert(CHECKPOINT_HEADER, header);
                r
            }
        }))
        .with_state(state)
}

/// Binds and serves until `shutdown` resolves; `on_bound` receives the
/// actual address (useful with port 0).
pub async fn serve(
    model: Arc<EditModel>,
    cfg: &ServeConfig,
    on_bound: impl FnOnce(SocketAddr),
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(&cfg.bind).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(model, cfg)).with_graceful_shutdown(shutdown).await
}
