//! HTTP front end for interactive box-prompted segmentation.
//!
//! Clients upload a frame, then send box prompts against it. Each session
//! (keyed by the `x-session-id` header) holds one active frame and its own
//! prompt rate limiter. Masks come back as uncompressed COCO RLE.

mod limiter;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use picoseg::backend::{run_prompt, BackendError, ModelInfo, SegmentBackend};
use picoseg::coco::{encode_rle, Rle};
use picoseg::imageio::{self, ImageError};
use picoseg::roi::{self, BBox, CropRect, PromptConfig};
use picoseg::tensor::Tensor;

pub use limiter::{Clock, ManualClock, RateLimiter, SystemClock, PROMPT_INTERVAL_MS};

pub const SESSION_HEADER: &str = "x-session-id";
const DEFAULT_SESSION: &str = "default";
const MAX_FRAME_BYTES: usize = 64 << 20;

const PLACEHOLDER_PAGE: &str = "<!doctype html>\n<title>picoseg</title>\n\
<p>picoseg gateway is running. No UI bundle is installed; \
start with <code>--static-dir</code> to serve one.</p>\n";

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    class: &'static str,
    message: String,
    retry_after_ms: Option<u64>,
}

impl ApiError {
    fn new(status: StatusCode, class: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            class,
            message: message.into(),
            retry_after_ms: None,
        }
    }

    fn rate_limited(retry_after_ms: u64) -> Self {
        Self {
            retry_after_ms: Some(retry_after_ms),
            ..Self::new(
                StatusCode::TOO_MANY_REQUESTS,
                "rate_limited",
                format!("prompts are limited to one per {PROMPT_INTERVAL_MS} ms"),
            )
        }
    }
}

impl From<BackendError> for ApiError {
    fn from(e: BackendError) -> Self {
        let status = match e {
            BackendError::Roi(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.class(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.class, "message": self.message });
        if let Some(ms) = self.retry_after_ms {
            body["retry_after_ms"] = json!(ms);
        }
        let mut resp = (self.status, Json(body)).into_response();
        if let Some(ms) = self.retry_after_ms {
            let secs = ms.div_ceil(1000).max(1);
            resp.headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from(secs));
        }
        resp
    }
}

struct Frame {
    id: u64,
    image: Arc<Tensor>,
}

#[derive(Default)]
struct Session {
    frame: Option<Frame>,
    limiter: RateLimiter,
}

/// Shared service state: one immutable model, per-session frames.
pub struct AppState {
    backend: Arc<dyn SegmentBackend>,
    info: ModelInfo,
    clock: Arc<dyn Clock>,
    sessions: Mutex<HashMap<String, Session>>,
    next_frame: AtomicU64,
    static_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(
        backend: Box<dyn SegmentBackend>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, BackendError> {
        let info = backend.info()?;
        Ok(Self {
            backend: Arc::from(backend),
            info,
            clock,
            sessions: Mutex::new(HashMap::new()),
            next_frame: AtomicU64::new(1),
            static_dir: None,
        })
    }

    pub fn with_static_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.static_dir = Some(dir.into());
        self
    }

    pub fn model_info(&self) -> ModelInfo {
        self.info
    }
}

fn session_id(headers: &HeaderMap) -> String {
    headers
        .get(SESSION_HEADER)
        .and_then(|v| v.to_str().ok())
        .filter(|s| !s.is_empty())
        .unwrap_or(DEFAULT_SESSION)
        .to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameInfo {
    pub frame_id: u64,
    pub width: usize,
    pub height: usize,
}

async fn upload_frame(
    State(app): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<FrameInfo>, ApiError> {
    let image = tokio::task::spawn_blocking(move || imageio::decode_image(&body))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(|e| match e {
            ImageError::Unsupported => ApiError::new(
                StatusCode::UNSUPPORTED_MEDIA_TYPE,
                "unsupported_media",
                e.to_string(),
            ),
            other => ApiError::new(StatusCode::BAD_REQUEST, "image", other.to_string()),
        })?;
    let info = FrameInfo {
        frame_id: app.next_frame.fetch_add(1, Ordering::Relaxed),
        width: image.width(),
        height: image.height(),
    };
    let mut sessions = app.sessions.lock().expect("session lock");
    sessions.entry(session_id(&headers)).or_default().frame = Some(Frame {
        id: info.frame_id,
        image: Arc::new(image),
    });
    log::info!(
        "frame {} stored ({}x{})",
        info.frame_id,
        info.width,
        info.height
    );
    Ok(Json(info))
}

/// Size of the surface the box was drawn on, when it differs from the frame.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DisplaySize {
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub frame_id: u64,
    pub bbox: BBox,
    #[serde(default)]
    pub display: Option<DisplaySize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub frame_id: u64,
    pub mask: Rle,
    pub rect: CropRect,
    pub latency_ms: f64,
    pub model: String,
}

async fn segment(
    State(app): State<Arc<AppState>>,
    headers: HeaderMap,
    req: Result<Json<SegmentRequest>, JsonRejection>,
) -> Result<Json<SegmentResponse>, ApiError> {
    let Json(req) = req.map_err(|e| ApiError::new(e.status(), "request", e.body_text()))?;
    let sid = session_id(&headers);

    // Validation happens before the limiter sees the prompt, so malformed
    // requests never consume the window.
    let (image, bbox) = {
        let mut sessions = app.sessions.lock().expect("session lock");
        let session = sessions.entry(sid).or_default();
        let frame = session
            .frame
            .as_ref()
            .filter(|f| f.id == req.frame_id)
            .ok_or_else(|| {
                ApiError::new(
                    StatusCode::NOT_FOUND,
                    "unknown_frame",
                    format!(
                        "frame {} is not the active frame of this session",
                        req.frame_id
                    ),
                )
            })?;
        let (w, h) = (frame.image.width() as f64, frame.image.height() as f64);
        let bbox = match req.display {
            Some(d) => roi::display_to_sensor(req.bbox, (d.width, d.height), (w, h))
                .map_err(BackendError::from)?,
            None => req.bbox,
        };
        let cfg = PromptConfig {
            size: app.backend.spec().input_size,
            ..PromptConfig::default()
        };
        roi::make_square_roi(bbox, &cfg, (w, h)).map_err(BackendError::from)?;
        session
            .limiter
            .admit(app.clock.now_ms())
            .map_err(ApiError::rate_limited)?;
        (frame.image.clone(), bbox)
    };

    let backend = app.backend.clone();
    let result =
        tokio::task::spawn_blocking(move || run_prompt(backend.as_ref(), &image, bbox, None))
            .await
            .map_err(|e| {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
            })??;
    log::debug!(
        "prompt on frame {} took {:.1} ms",
        req.frame_id,
        result.latency_ms
    );
    Ok(Json(SegmentResponse {
        frame_id: req.frame_id,
        mask: encode_rle(&result.mask),
        rect: result.rect,
        latency_ms: result.latency_ms,
        model: app.backend.name().to_string(),
    }))
}

async fn model(State(app): State<Arc<AppState>>) -> Json<ModelInfo> {
    Json(app.info)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "ok": true }))
}

async fn placeholder() -> Html<&'static str> {
    Html(PLACEHOLDER_PAGE)
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/frames", post(upload_frame))
        .route("/segment", post(segment))
        .route("/model", get(model))
        .route("/healthz", get(healthz))
        .layer(DefaultBodyLimit::max(MAX_FRAME_BYTES));
    let app = match &state.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(placeholder)),
    };
    app.with_state(state)
}

/// Binds `listen` and serves until the process is stopped.
pub async fn serve(listen: &str, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(listen).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
