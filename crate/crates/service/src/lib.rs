//! HTTP inference for a trained checkpoint.
//!
//! Only the main path (SAP, then `G_m`) is served. Weights are loaded once
//! and never mutated, so requests share the model without locking.

use std::io::Cursor;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use candle_core::DType;
use facepencil::checkpoint::{load_groups, Checkpoint};
use facepencil::data::PhotoImage;
use facepencil::networks::FacePencil;
use facepencil::nn::{sketches_to_tensor, tensor_to_photos, ParamGroup};
use facepencil::sketch::{decode_sketch_png, Sketch, SketchKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

/// Parameter groups the main path reads.
pub const SERVED_GROUPS: [ParamGroup; 5] = [
    ParamGroup::Classifier,
    ParamGroup::Sap,
    ParamGroup::EncoderM,
    ParamGroup::SharedResidual,
    ParamGroup::SharedDecoder,
];

/// Longest accepted sketch side before resizing.
pub const MAX_SKETCH_SIDE: u32 = 4096;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("payload too large: {0}")]
    TooLarge(String),
    #[error("server busy")]
    Busy,
    #[error(transparent)]
    Model(#[from] facepencil::Error),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::TooLarge(_) => StatusCode::PAYLOAD_TOO_LARGE,
            Self::Busy => StatusCode::SERVICE_UNAVAILABLE,
            Self::Model(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}

/// A generated face, plus the attention layers quantized to 8 bits when
/// requested.
#[derive(Debug, Clone)]
pub struct Generated {
    pub image: PhotoImage,
    pub attention: Option<Vec<Vec<u8>>>,
}

pub struct InferenceModel {
    model: FacePencil,
    checkpoint_hash: String,
}

impl std::fmt::Debug for InferenceModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InferenceModel")
            .field("model_id", &self.model_id())
            .field("resolution", &self.resolution())
            .finish()
    }
}

impl InferenceModel {
    pub fn from_bytes(bytes: &[u8]) -> facepencil::Result<Self> {
        let ck = Checkpoint::from_bytes(bytes)?;
        let model = FacePencil::new(&ck.meta.model, DType::F32, 0)?;
        load_groups(&model.store, &ck.params(), &SERVED_GROUPS)?;
        Ok(Self {
            model,
            checkpoint_hash: hex::encode(Sha256::digest(bytes)),
        })
    }

    pub fn load(path: &Path) -> facepencil::Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| facepencil::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn resolution(&self) -> usize {
        self.model.cfg.resolution
    }

    pub fn kernel_sizes(&self) -> &[usize] {
        &self.model.cfg.sap.kernel_sizes
    }

    pub fn num_branches(&self) -> usize {
        self.model.cfg.sap.num_branches()
    }

    pub fn checkpoint_hash(&self) -> &str {
        &self.checkpoint_hash
    }

    /// First 12 hex digits of the checkpoint's SHA-256.
    pub fn model_id(&self) -> &str {
        &self.checkpoint_hash[..12]
    }

    /// Resizes `sketch` to the model resolution (nearest neighbour) and runs
    /// the main path.
    pub fn generate(&self, sketch: &Sketch, want_attention: bool) -> facepencil::Result<Generated> {
        let r = self.resolution();
        let sketch = sketch.resize_nearest(r, r);
        let x = sketches_to_tensor(&[&sketch], DType::F32)?;
        let (out, sap) = self.model.forward_main(&x)?;
        let image = tensor_to_photos(&out.image, "generated")?.remove(0);
        let attention = if want_attention {
            let a = sap.attention.squeeze(0)?.to_dtype(DType::F32)?;
            let n = a.dim(0)?;
            let flat = a.flatten_from(1)?.to_vec2::<f32>()?;
            let pixels = flat[0].len();
            let mut layers = vec![vec![0u8; pixels]; n];
            let mut column = vec![0f32; n];
            for p in 0..pixels {
                for (i, c) in column.iter_mut().enumerate() {
                    *c = flat[i][p];
                }
                for (i, q) in quantize_simplex(&column).into_iter().enumerate() {
                    layers[i][p] = q;
                }
            }
            Some(layers)
        } else {
            None
        };
        Ok(Generated { image, attention })
    }
}

/// Largest-remainder rounding of a probability vector to bytes that sum to
/// exactly 255.
pub fn quantize_simplex(p: &[f32]) -> Vec<u8> {
    let scaled: Vec<f64> = p.iter().map(|&v| f64::from(v.clamp(0.0, 1.0)) * 255.0).collect();
    let mut q: Vec<u32> = scaled.iter().map(|v| v.floor() as u32).collect();
    let total: u32 = q.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (scaled[a] - scaled[a].floor(), scaled[b] - scaled[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    if total <= 255 {
        for &i in order.iter().cycle().take((255 - total) as usize) {
            q[i] += 1;
        }
    } else {
        // Only reachable when the input overshoots 1.
        let mut excess = total - 255;
        for &i in order.iter().rev().cycle() {
            if excess == 0 {
                break;
            }
            if q[i] > 0 {
                q[i] -= 1;
                excess -= 1;
            }
        }
    }
    q.into_iter().map(|v| v.min(255) as u8).collect()
}

pub fn encode_rgb_png(image: &PhotoImage) -> facepencil::Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    image.to_rgb8().write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn encode_gray_png(pixels: &[u8], side: usize) -> facepencil::Result<Vec<u8>> {
    let img = image::GrayImage::from_raw(side as u32, side as u32, pixels.to_vec())
        .ok_or_else(|| facepencil::Error::Shape("attention layer size".into()))?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Decodes an uploaded sketch, rejecting images larger than
/// [`MAX_SKETCH_SIDE`] before allocating their pixels.
pub fn decode_upload(bytes: &[u8]) -> Result<Sketch, ServiceError> {
    let (w, h) = image::ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| ServiceError::BadRequest(e.to_string()))?
        .into_dimensions()
        .map_err(|e| ServiceError::BadRequest(format!("undecodable sketch: {e}")))?;
    if w > MAX_SKETCH_SIDE || h > MAX_SKETCH_SIDE {
        return Err(ServiceError::TooLarge(format!("{w}x{h} sketch")));
    }
    decode_sketch_png(bytes, SketchKind::HandDrawn)
        .map_err(|e| ServiceError::BadRequest(format!("undecodable sketch: {e}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateJson {
    /// Base64 PNG.
    pub sketch: String,
    #[serde(default)]
    pub want_attention: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub image_b64: String,
    pub attention_b64: Vec<String>,
    pub latency_ms: f64,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub resolution: usize,
    #[serde(rename = "N_r")]
    pub n_r: usize,
    pub kernel_sizes: Vec<usize>,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone, Copy)]
pub struct ServiceConfig {
    pub max_body_bytes: usize,
    pub max_in_flight: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_body_bytes: 4 << 20,
            max_in_flight: 4,
        }
    }
}

#[derive(Clone)]
struct AppState {
    model: Arc<InferenceModel>,
    permits: Arc<Semaphore>,
}

pub fn router(model: Arc<InferenceModel>, cfg: ServiceConfig) -> Router {
    let state = AppState {
        model,
        permits: Arc::new(Semaphore::new(cfg.max_in_flight)),
    };
    Router::new()
        .route("/health", get(health))
        .route("/model", get(model_info))
        .route("/generate", post(generate))
        .layer(DefaultBodyLimit::max(cfg.max_body_bytes))
        .with_state(state)
}

pub async fn serve(model: Arc<InferenceModel>, bind: SocketAddr, cfg: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("serving {} on {}", model.model_id(), listener.local_addr()?);
    axum::serve(listener, router(model, cfg)).await
}

async fn health(State(st): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "model_id": st.model.model_id() }))
}

async fn model_info(State(st): State<AppState>) -> Json<ModelInfo> {
    let m = &st.model;
    Json(ModelInfo {
        resolution: m.resolution(),
        n_r: m.num_branches(),
        kernel_sizes: m.kernel_sizes().to_vec(),
        checkpoint_hash: m.checkpoint_hash().to_string(),
    })
}

async fn read_request(st: &AppState, req: Request) -> Result<(Bytes, bool), ServiceError> {
    let multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let reject = |status: StatusCode, text: String| {
        if status == StatusCode::PAYLOAD_TOO_LARGE {
            ServiceError::TooLarge(text)
        } else {
            ServiceError::BadRequest(text)
        }
    };
    if !multipart {
        let Json(body) = Json::<GenerateJson>::from_request(req, st)
            .await
            .map_err(|r| reject(r.status(), r.body_text()))?;
        let png = B64
            .decode(body.sketch.trim())
            .map_err(|e| ServiceError::BadRequest(format!("sketch is not base64: {e}")))?;
        return Ok((png.into(), body.want_attention));
    }
    let mut form = Multipart::from_request(req, st)
        .await
        .map_err(|r| reject(r.status(), r.body_text()))?;
    let (mut sketch, mut want_attention) = (None, false);
    while let Some(field) = form.next_field().await.map_err(|e| reject(e.status(), e.body_text()))? {
        match field.name() {
            Some("sketch") => sketch = Some(field.bytes().await.map_err(|e| reject(e.status(), e.body_text()))?),
            Some("want_attention") => {
                let text = field.text().await.map_err(|e| reject(e.status(), e.body_text()))?;
                want_attention = matches!(text.trim(), "true" | "1");
            }
            _ => {}
        }
    }
    let sketch = sketch.ok_or_else(|| ServiceError::BadRequest("missing sketch field".into()))?;
    Ok((sketch, want_attention))
}

async fn generate(State(st): State<AppState>, req: Request) -> Result<Json<GenerateResponse>, ServiceError> {
    let start = Instant::now();
    let permit = st.permits.clone().try_acquire_owned().map_err(|_| ServiceError::Busy)?;
    let (png, want_attention) = read_request(&st, req).await?;
    let model = st.model.clone();
    let response = tokio::task::spawn_blocking(move || -> Result<GenerateResponse, ServiceError> {
        let _permit = permit;
        let sketch = decode_upload(&png)?;
        let out = model.generate(&sketch, want_attention)?;
        let attention_b64 = out
            .attention
            .unwrap_or_default()
            .iter()
            .map(|layer| encode_gray_png(layer, model.resolution()).map(|b| B64.encode(b)))
            .collect::<facepencil::Result<Vec<_>>>()?;
        Ok(GenerateResponse {
            image_b64: B64.encode(encode_rgb_png(&out.image)?),
            attention_b64,
            latency_ms: 0.0,
            model_id: model.model_id().to_string(),
        })
    })
    .await
    .map_err(|e| ServiceError::Model(facepencil::Error::Numerical(format!("inference task failed: {e}"))))??;
    Ok(Json(GenerateResponse {
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        ..response
    }))
}
