//! HTTP routes.

use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use spatialgan_core::evaluation::estimate_segmentation;
use spatialgan_core::interpolation::generate_interpolation;
use spatialgan_core::ModelBundle;

use crate::registry::Registry;
use crate::wire::*;

/// Request size limits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Limits {
    pub max_body_bytes: usize,
    /// Frames one interpolation request may render.
    pub max_frames: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self { max_body_bytes: 4 << 20, max_frames: 256 }
    }
}

#[derive(Debug)]
pub enum ApiError {
    UnknownModel(String),
    Invalid(Vec<FieldError>),
    TooLarge(String),
    BadRequest(String),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            Self::UnknownModel(id) => {
                (StatusCode::NOT_FOUND, ErrorBody { error: format!("unknown model '{id}'"), reasons: vec![] })
            }
            Self::Invalid(reasons) => {
                (StatusCode::UNPROCESSABLE_ENTITY, ErrorBody { error: "invalid request".into(), reasons })
            }
            Self::TooLarge(msg) => (StatusCode::PAYLOAD_TOO_LARGE, ErrorBody { error: msg, reasons: vec![] }),
            Self::BadRequest(msg) => (StatusCode::BAD_REQUEST, ErrorBody { error: msg, reasons: vec![] }),
            Self::Internal(msg) => (StatusCode::INTERNAL_SERVER_ERROR, ErrorBody { error: msg, reasons: vec![] }),
        };
        (status, Json(body)).into_response()
    }
}

#[derive(Clone)]
struct AppState {
    registry: Arc<Registry>,
    limits: Limits,
}

pub fn router(registry: Arc<Registry>, limits: Limits) -> Router {
    Router::new()
        .route("/models", get(models))
        .route("/generate", post(generate))
        .route("/interpolate", post(interpolate))
        .route("/segment", post(segment))
        .with_state(AppState { registry, limits })
}

/// Reads a JSON body, enforcing the size limit with a message that names it.
async fn read_json<T: DeserializeOwned>(body: Body, limit: usize) -> Result<T, ApiError> {
    let bytes = to_bytes(body, limit)
        .await
        .map_err(|_| ApiError::TooLarge(format!("request body exceeds the {limit}-byte limit")))?;
    serde_json::from_slice(&bytes).map_err(|e| {
        if e.is_data() {
            ApiError::Invalid(vec![FieldError::new("body", e.to_string())])
        } else {
            ApiError::BadRequest(format!("malformed JSON: {e}"))
        }
    })
}

fn lookup(st: &AppState, id: &str) -> Result<Arc<ModelBundle>, ApiError> {
    st.registry.get(id).ok_or_else(|| ApiError::UnknownModel(id.to_string()))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> spatialgan_core::Result<T> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(|e| ApiError::Internal(e.to_string()))
}

async fn models(State(st): State<AppState>) -> Json<ModelsResponse> {
    Json(ModelsResponse { models: st.registry.summaries() })
}

async fn generate(State(st): State<AppState>, body: Body) -> Result<Json<GenerateResponse>, ApiError> {
    let req: GenerateRequest = read_json(body, st.limits.max_body_bytes).await?;
    let bundle = lookup(&st, &req.model_id)?;
    let (z, c, s) = req.resolve(bundle.arch()).map_err(ApiError::Invalid)?;
    let (z2, c2, s2) = (z.clone(), c.clone(), s.clone());
    let image = blocking(move || Ok(bundle.generator.generate(&[z2], &[c2], &[s2])?.remove(0))).await?;
    Ok(Json(GenerateResponse {
        model_id: req.model_id,
        image: b64(&encode_png(&image)),
        z: z.values().to_vec(),
        seed: req.seed,
        c: c.bits().to_vec(),
        s: IndexMap::encode(&s),
    }))
}

async fn interpolate(State(st): State<AppState>, body: Body) -> Result<Json<InterpolateResponse>, ApiError> {
    let req: InterpolateRequest = read_json(body, st.limits.max_body_bytes).await?;
    let bundle = lookup(&st, &req.model_id)?;
    let frames = req.spec.frame_count();
    if frames > st.limits.max_frames {
        return Err(ApiError::TooLarge(format!(
            "spec renders {frames} frames, the limit is {}",
            st.limits.max_frames
        )));
    }
    let spec = req.spec.resolve(bundle.arch()).map_err(ApiError::Invalid)?;
    let digest = spec.digest();
    let frames = blocking(move || generate_interpolation(&bundle, &spec)).await?;
    Ok(Json(InterpolateResponse {
        model_id: req.model_id,
        spec_digest: digest,
        frames: frames
            .iter()
            .map(|f| FrameImage { record: FrameRecord::from_frame(f), image: b64(&encode_png(&f.image)) })
            .collect(),
    }))
}

async fn segment(State(st): State<AppState>, body: Body) -> Result<Json<SegmentResponse>, ApiError> {
    let req: SegmentRequest = read_json(body, st.limits.max_body_bytes).await?;
    let bundle = lookup(&st, &req.model_id)?;
    let image = req.resolve(bundle.arch()).map_err(ApiError::Invalid)?;
    let map = blocking(move || estimate_segmentation(&bundle.segmentor, &image)).await?;
    Ok(Json(SegmentResponse { model_id: req.model_id, segmentation: IndexMap::encode(&map) }))
}
