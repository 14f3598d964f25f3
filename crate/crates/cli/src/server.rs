//! HTTP API over a frozen pipeline.
//!
//! Images travel as base64 PNG inside JSON, except uploads, which are raw
//! PNG request bodies. Errors come back as `{"error": {"code", "message"}}`.

use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use lru::LruCache;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use ssae_core::checkpoint::FORMAT_VERSION;
use ssae_core::imageio::{decode_png_rgb, encode_png_gray, encode_png_rgb, gray_to_mask, is_png, mask_to_gray, rgb_to_tensor, tensor_to_rgb};
use ssae_core::pipeline::Pipeline;
use ssae_core::smpn::binarize_mask;
use ssae_core::style_edit::{EditSpec, MaskSource};
use ssae_core::{Error as CoreError, RoiLabel};
use ssae_tensor::Tensor;

use crate::cli::ServeArgs;
use crate::config::{Config, ServiceSection};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn bad(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::MissingRoiModels(_) => Self::new(StatusCode::CONFLICT, "missing_roi_models", e.to_string()),
            CoreError::Shape { .. } | CoreError::Invalid(_) | CoreError::InvalidLayer { .. } => Self::bad("invalid_edit", e.to_string()),
            CoreError::ImageFormat(_) | CoreError::Image(_) => Self::bad("unsupported_image", e.to_string()),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": { "code": self.code, "message": self.message } }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// Shared service state. The pipeline is read-only; the session store is
/// the only mutable part.
#[derive(Clone)]
pub struct AppState {
    pipeline: Arc<Pipeline>,
    sessions: Arc<Mutex<LruCache<String, Arc<Tensor<f32>>>>>,
    max_upload_bytes: usize,
}

impl AppState {
    pub fn new(pipeline: Pipeline, service: &ServiceSection) -> Self {
        let cap = NonZeroUsize::new(service.session_cap.max(1)).unwrap();
        Self {
            pipeline: Arc::new(pipeline),
            sessions: Arc::new(Mutex::new(LruCache::new(cap))),
            max_upload_bytes: service.max_upload_bytes,
        }
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Tensor<f32>>> {
        let mut s = self.sessions.lock().expect("session lock");
        s.get(id).cloned().ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_image", format!("no image with id {id:?}")))
    }

    /// Decodes a PNG and checks its size against the models.
    fn decode_image(&self, bytes: &[u8]) -> ApiResult<Tensor<f32>> {
        if !is_png(bytes) {
            return Err(ApiError::bad("unsupported_image", "images must be PNG"));
        }
        let rgb = decode_png_rgb(bytes)?;
        let s = self.pipeline.image_size();
        if rgb.dimensions() != (s as u32, s as u32) {
            return Err(ApiError::bad("bad_image_size", format!("image is {}x{}, expected {s}x{s}", rgb.width(), rgb.height())));
        }
        Ok(rgb_to_tensor(&rgb).reshape(&[1, 3, s, s]))
    }
}

pub fn router(state: AppState) -> Router {
    let upload_limit = state.max_upload_bytes;
    Router::new()
        .route("/api/health", get(health))
        .route("/api/rois", get(rois))
        .route("/api/images", post(upload).layer(DefaultBodyLimit::max(upload_limit)))
        .route("/api/images/{id}/masks", get(masks))
        // Base64 inflates payloads by a third; leave room for an image and a mask.
        .route("/api/edit", post(edit).layer(DefaultBodyLimit::max(upload_limit * 3)))
        .with_state(state)
}

async fn health(State(st): State<AppState>) -> Json<Value> {
    Json(json!({ "status": "ok", "bundle_version": FORMAT_VERSION, "image_size": st.pipeline.image_size() }))
}

async fn rois() -> Json<Value> {
    Json(Value::Array(RoiLabel::ALL.iter().map(|r| json!({ "code": r.code(), "name": r.name() })).collect()))
}

async fn upload(State(st): State<AppState>, body: Bytes) -> ApiResult<Json<Value>> {
    let image = st.decode_image(&body)?;
    let id = format!("{:016x}", rand::random::<u64>());
    st.sessions.lock().expect("session lock").put(id.clone(), Arc::new(image));
    Ok(Json(json!({ "image_id": id })))
}

fn png_b64(image: &Tensor<f32>) -> ApiResult<String> {
    Ok(B64.encode(encode_png_rgb(&tensor_to_rgb(image)?)?))
}

fn mask_b64(mask: &Tensor<f32>) -> ApiResult<String> {
    Ok(B64.encode(encode_png_gray(&mask_to_gray(mask)?)?))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn masks(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let image = st.session(&id)?;
    let pipeline = Arc::clone(&st.pipeline);
    let set = blocking(move || Ok(pipeline.masks(&image)?)).await?;
    let mut out = serde_json::Map::new();
    for (roi, soft) in &set.masks {
        let hard = binarize_mask(soft, 0.5)?;
        out.insert(
            roi.code().to_string(),
            json!({ "roi": roi.name(), "soft_png": mask_b64(soft)?, "hard_png": mask_b64(&hard)? }),
        );
    }
    Ok(Json(json!({ "image_id": id, "masks": out })))
}

fn default_strength() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub image_id: Option<String>,
    /// Base64 PNG, used when no `image_id` is given.
    pub image_png: Option<String>,
    pub roi: RoiLabel,
    pub seed: Option<u64>,
    #[serde(default = "default_strength")]
    pub strength: f64,
    pub injection_layer: Option<usize>,
    #[serde(default)]
    pub refine: bool,
    #[serde(default)]
    pub mask_source: MaskSource,
    /// Base64 grayscale PNG for `user_supplied` / `ground_truth` sources.
    pub mask_png: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EditResponse {
    pub image_png: String,
    pub mask_png: String,
    pub seed: u64,
    pub roi: RoiLabel,
    pub strength: f64,
    pub layer: usize,
    pub refined: bool,
    pub timing_s: f64,
}

fn decode_b64(field: &str, s: &str) -> ApiResult<Vec<u8>> {
    B64.decode(s).map_err(|e| ApiError::bad("malformed_request", format!("{field} is not valid base64: {e}")))
}

async fn edit(State(st): State<AppState>, body: Bytes) -> ApiResult<Json<EditResponse>> {
    let req: EditRequest = serde_json::from_slice(&body).map_err(|e| ApiError::bad("malformed_request", e.to_string()))?;
    let image = match (&req.image_id, &req.image_png) {
        (Some(id), _) => st.session(id)?,
        (None, Some(png)) => Arc::new(st.decode_image(&decode_b64("image_png", png)?)?),
        (None, None) => return Err(ApiError::bad("malformed_request", "give image_id or image_png")),
    };
    let mask = match &req.mask_png {
        Some(png) => {
            let bytes = decode_b64("mask_png", png)?;
            if !is_png(&bytes) {
                return Err(ApiError::bad("unsupported_image", "masks must be PNG"));
            }
            let gray = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
                .map_err(|e| ApiError::bad("unsupported_image", e.to_string()))?
                .to_luma8();
            Some(gray_to_mask(&gray))
        }
        None => None,
    };
    let seed = req.seed.unwrap_or_else(|| rand::random::<u64>() >> 11);
    let spec = EditSpec {
        injection_layer: req.injection_layer,
        refine: req.refine,
        mask_source: req.mask_source,
        ..EditSpec::new(req.roi, seed, req.strength)
    };
    let pipeline = Arc::clone(&st.pipeline);
    blocking(move || {
        let t = Instant::now();
        let e = pipeline.edit(&image, &spec, mask.as_ref())?;
        let timing_s = t.elapsed().as_secs_f64();
        Ok(Json(EditResponse {
            image_png: png_b64(e.outputs.final_image())?,
            mask_png: mask_b64(&e.mask)?,
            seed,
            roi: spec.roi,
            strength: spec.strength,
            layer: e.layer,
            refined: e.refined,
            timing_s,
        }))
    })
    .await
}

pub fn serve_blocking(config: &Config, a: ServeArgs) -> Result<()> {
    let pipeline = Pipeline::load(&a.bundle.bundle)?;
    let mut service = config.service.clone();
    if let Some(p) = a.port {
        service.port = p;
    }
    if let Some(h) = a.host {
        service.host = h;
    }
    let state = AppState::new(pipeline, &service);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let addr = format!("{}:{}", service.host, service.port);
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
