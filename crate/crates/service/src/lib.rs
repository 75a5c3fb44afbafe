//! HTTP inference: `POST /generate`, `GET /meta`, `GET /health`.
//!
//! One model per process. Generation passes run one at a time on the
//! blocking pool; requests queue on the model lock.

use std::io::Cursor;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use dtc_core::model::{Model, RegionInput};
use dtc_core::scene::{tensor_to_image, BBox};
use dtc_core::text::T_MAX;
use dtc_core::{Checkpoint, DtcError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRequest {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub caption: String,
    #[serde(default)]
    pub region_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub regions: Vec<RegionRequest>,
    #[serde(default)]
    pub global_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    /// PNG, standard base64 with padding.
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub global_seed: u64,
    pub region_seeds: Vec<u64>,
    pub warnings: Vec<String>,
    /// Per region, the caption words mapped to UNK.
    pub unknown_tokens: Vec<Vec<String>>,
    pub model_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub resolution: usize,
    pub m_max: usize,
    pub max_caption_tokens: usize,
    pub vocabulary: Vec<String>,
    pub model_hash: String,
}

/// Body of every non-200 answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    /// Machine-readable reason, e.g. `box: x2 ≤ x1`.
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub region: Option<usize>,
    pub detail: String,
}

pub mod reason {
    pub const MALFORMED: &str = "request: malformed";
    pub const NO_REGIONS: &str = "regions: empty";
    pub const TOO_MANY: &str = "regions: more than m_max";
    pub const NOT_FINITE: &str = "box: not finite";
    pub const X_ORDER: &str = "box: x2 ≤ x1";
    pub const Y_ORDER: &str = "box: y2 ≤ y1";
    pub const X1_RANGE: &str = "box: x1 < 0";
    pub const Y1_RANGE: &str = "box: y1 < 0";
    pub const X2_RANGE: &str = "box: x2 > 1";
    pub const Y2_RANGE: &str = "box: y2 > 1";
    pub const EMPTY_CAPTION: &str = "caption: empty";
    pub const NOT_LOADED: &str = "model: not loaded";
    pub const INTERNAL: &str = "internal";
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rejection {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl Rejection {
    fn bad(reason: &str, region: Option<usize>, detail: impl Into<String>) -> Self {
        Rejection {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody {
                error: reason.into(),
                region,
                detail: detail.into(),
            },
        }
    }

    fn unavailable() -> Self {
        Rejection {
            status: StatusCode::SERVICE_UNAVAILABLE,
            body: ErrorBody {
                error: reason::NOT_LOADED.into(),
                region: None,
                detail: "no checkpoint is loaded".into(),
            },
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Rejection {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: ErrorBody {
                error: reason::INTERNAL.into(),
                region: None,
                detail: e.to_string(),
            },
        }
    }
}

impl IntoResponse for Rejection {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

fn check_box(i: usize, b: [f64; 4]) -> Result<(), Rejection> {
    let [x1, y1, x2, y2] = b;
    let fail = |r: &str| Err(Rejection::bad(r, Some(i), format!("region {i}: box {b:?}")));
    if b.iter().any(|v| !v.is_finite()) {
        return fail(reason::NOT_FINITE);
    }
    if x2 <= x1 {
        return fail(reason::X_ORDER);
    }
    if y2 <= y1 {
        return fail(reason::Y_ORDER);
    }
    if x1 < 0.0 {
        return fail(reason::X1_RANGE);
    }
    if y1 < 0.0 {
        return fail(reason::Y1_RANGE);
    }
    if x2 > 1.0 {
        return fail(reason::X2_RANGE);
    }
    if y2 > 1.0 {
        return fail(reason::Y2_RANGE);
    }
    Ok(())
}

/// Checks a request against the region invariants; the first violation wins.
pub fn validate_request(req: &GenerateRequest, m_max: usize) -> Result<(), Rejection> {
    if req.regions.is_empty() {
        return Err(Rejection::bad(reason::NO_REGIONS, None, "at least one region is required"));
    }
    if req.regions.len() > m_max {
        return Err(Rejection::bad(
            reason::TOO_MANY,
            None,
            format!("{} regions, at most {m_max}", req.regions.len()),
        ));
    }
    for (i, r) in req.regions.iter().enumerate() {
        check_box(i, r.bbox)?;
        if r.caption.trim().is_empty() {
            return Err(Rejection::bad(reason::EMPTY_CAPTION, Some(i), format!("region {i} has no caption")));
        }
    }
    Ok(())
}

pub fn encode_png(img: &image::RgbImage) -> Result<Vec<u8>, image::ImageError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

struct Loaded {
    model: Mutex<Model<f32>>,
    meta: Meta,
}

/// Shared server state; `None` model answers 503.
pub struct AppState {
    loaded: Option<Loaded>,
}

impl AppState {
    pub fn unloaded() -> Self {
        AppState { loaded: None }
    }

    pub fn new(model: Model<f32>, model_hash: String) -> Result<Self, DtcError> {
        let gan = model.gan()?;
        let meta = Meta {
            resolution: gan.generator.config.resolution,
            m_max: gan.generator.config.max_regions,
            max_caption_tokens: T_MAX - 2,
            vocabulary: model.encoders.vocab.tokens().to_vec(),
            model_hash,
        };
        Ok(AppState {
            loaded: Some(Loaded {
                model: Mutex::new(model),
                meta,
            }),
        })
    }

    /// Loads a GAN checkpoint; the hash covers its weights.
    pub fn from_checkpoint(path: impl AsRef<Path>) -> Result<Self, DtcError> {
        let ck = Checkpoint::load(path)?;
        let hash = ck.model_hash();
        Self::new(Model::from_checkpoint(&ck)?, hash)
    }

    pub fn meta(&self) -> Option<&Meta> {
        self.loaded.as_ref().map(|l| &l.meta)
    }

    /// Validation, generation and encoding of one request.
    pub fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, Rejection> {
        let loaded = self.loaded.as_ref().ok_or_else(Rejection::unavailable)?;
        validate_request(req, loaded.meta.m_max)?;
        let regions: Vec<RegionInput> = req
            .regions
            .iter()
            .map(|r| RegionInput {
                bbox: BBox(r.bbox),
                caption: r.caption.clone(),
                seed: r.region_seed,
            })
            .collect();
        let out = {
            let model = loaded.model.lock().unwrap_or_else(|p| p.into_inner());
            model
                .generate(&regions, req.global_seed, &mut rand::thread_rng())
                .map_err(Rejection::internal)?
        };
        let img = tensor_to_image(&out.image).map_err(Rejection::internal)?;
        let png = encode_png(&img).map_err(Rejection::internal)?;
        let warnings = out
            .unknown_tokens
            .iter()
            .enumerate()
            .flat_map(|(i, toks)| {
                toks.iter()
                    .map(move |t| format!("region {i}: '{t}' is not in the vocabulary (mapped to UNK)"))
            })
            .collect();
        Ok(GenerateResponse {
            image: STANDARD.encode(png),
            width: img.width(),
            height: img.height(),
            global_seed: out.global_seed,
            region_seeds: out.region_seeds,
            warnings,
            unknown_tokens: out.unknown_tokens,
            model_hash: loaded.meta.model_hash.clone(),
        })
    }
}

type Shared = Arc<AppState>;

async fn health() -> &'static str {
    "ok"
}

async fn meta(State(state): State<Shared>) -> Result<Json<Meta>, Rejection> {
    state.meta().cloned().map(Json).ok_or_else(Rejection::unavailable)
}

async fn generate(State(state): State<Shared>, body: Bytes) -> Result<Json<GenerateResponse>, Rejection> {
    let req: GenerateRequest =
        serde_json::from_slice(&body).map_err(|e| Rejection::bad(reason::MALFORMED, None, e.to_string()))?;
    tokio::task::spawn_blocking(move || state.generate(&req))
        .await
        .map_err(Rejection::internal)?
        .map(Json)
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/meta", get(meta))
        .route("/generate", post(generate))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: Shared) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
