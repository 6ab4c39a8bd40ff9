//! HTTP try-on service: lists fine-tuned concepts found in a runs directory
//! and runs inpainting jobs on a FIFO worker pool, polled by id.

mod concepts;
mod error;
mod jobs;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use dreampaint_core::{ImageTensor, LatentCodec, MaskTensor, DEFAULT_GUIDANCE};
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};

pub use concepts::{Concept, ConceptSummary, PREVIEW_FILE};
pub use error::{ApiError, ErrorBody, ServiceError};
pub use jobs::{Job, JobParams, JobQueue, JobState};

/// Request bodies above this size are rejected with 413.
pub const MAX_BODY_BYTES: usize = 10 * 1024 * 1024;
pub const QUEUE_LIMIT: usize = 16;
/// Directory under the runs root that holds job records and results.
pub const JOBS_DIR: &str = "_jobs";

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub runs_root: PathBuf,
    /// Worker threads; zero leaves every job queued.
    pub workers: usize,
    pub queue_limit: usize,
    /// Allowed CORS origin; `None` allows any.
    pub cors_origin: Option<String>,
}

impl ServiceConfig {
    pub fn new(runs_root: impl Into<PathBuf>) -> Self {
        Self {
            runs_root: runs_root.into(),
            workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            queue_limit: QUEUE_LIMIT,
            cors_origin: None,
        }
    }
}

struct Shared {
    config: ServiceConfig,
    concepts: RwLock<BTreeMap<String, Arc<Concept>>>,
    queue: Arc<JobQueue>,
}

/// Cloneable handle to the service state.
#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    /// Creates the runs directory if needed, loads concepts, starts workers,
    /// and restores finished jobs.
    pub fn start(config: ServiceConfig) -> Result<Self, ServiceError> {
        let jobs_dir = config.runs_root.join(JOBS_DIR);
        std::fs::create_dir_all(&jobs_dir).map_err(|source| ServiceError::RunsDir {
            path: jobs_dir.clone(),
            source,
        })?;
        let queue = JobQueue::start(jobs_dir, config.workers, config.queue_limit);
        let state = Self(Arc::new(Shared {
            config,
            concepts: RwLock::new(BTreeMap::new()),
            queue,
        }));
        state.rescan().map_err(|source| ServiceError::RunsDir {
            path: state.0.config.runs_root.clone(),
            source,
        })?;
        Ok(state)
    }

    pub fn queue(&self) -> &JobQueue {
        &self.0.queue
    }

    /// Loads fine-tuned runs that appeared since the last scan.
    pub fn rescan(&self) -> std::io::Result<Vec<ConceptSummary>> {
        let new = {
            let known = self.0.concepts.read().unwrap();
            concepts::scan_new(&self.0.config.runs_root, &known)?
        };
        let mut map = self.0.concepts.write().unwrap();
        for c in new {
            log::info!("loaded concept {} ({} {})", c.concept_id, c.token, c.class_noun);
            map.entry(c.concept_id.clone()).or_insert_with(|| Arc::new(c));
        }
        Ok(map.values().map(|c| c.summary()).collect())
    }

    fn concept(&self, id: &str) -> Option<Arc<Concept>> {
        if let Some(c) = self.0.concepts.read().unwrap().get(id) {
            return Some(Arc::clone(c));
        }
        self.rescan().ok()?;
        self.0.concepts.read().unwrap().get(id).cloned()
    }
}

pub fn router(state: AppState) -> Router {
    let origin = match &state.0.config.cors_origin {
        Some(o) => HeaderValue::from_str(o).map(AllowOrigin::exact).unwrap_or_else(|_| AllowOrigin::any()),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/healthz", get(healthz))
        .route("/api/defaults", get(defaults))
        .route("/api/concepts", get(list_concepts))
        .route("/api/concepts/{id}/preview", get(concept_preview))
        .route("/api/inpaint", post(submit_inpaint))
        .route("/api/mask/echo", post(echo_mask))
        .route("/api/jobs/{id}", get(job_status))
        .route("/api/jobs/{id}/result", get(job_result))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(cors)
        .with_state(state)
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> Result<(), ServiceError> {
    let state = AppState::start(config)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServiceError::Bind { addr, source })?;
    log::info!("listening on {addr}");
    let queue = state.clone();
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(ServiceError::Serve)?;
    queue.queue().stop();
    Ok(())
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

#[derive(Serialize)]
struct Defaults {
    guidance: f64,
    composite: bool,
    queue_limit: usize,
    max_body_bytes: usize,
}

async fn defaults(State(state): State<AppState>) -> Json<Defaults> {
    Json(Defaults {
        guidance: DEFAULT_GUIDANCE,
        composite: true,
        queue_limit: state.0.config.queue_limit,
        max_body_bytes: MAX_BODY_BYTES,
    })
}

async fn list_concepts(State(state): State<AppState>) -> Result<Json<Vec<ConceptSummary>>, ApiError> {
    tokio::task::spawn_blocking(move || state.rescan())
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map(Json)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "E_SCAN", e.to_string()))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn concept_preview(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let concept = state
        .concept(&id)
        .ok_or_else(|| ApiError::not_found("E_UNKNOWN_CONCEPT", format!("no concept `{id}`")))?;
    let bytes = tokio::fs::read(concept.preview_path())
        .await
        .map_err(|_| ApiError::not_found("E_NO_PREVIEW", format!("concept `{id}` has no preview image")))?;
    Ok(png(bytes))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InpaintBody {
    pub image: String,
    pub mask: String,
    pub concept_id: String,
    #[serde(default)]
    pub prompt_extra: Option<String>,
    #[serde(default)]
    pub guidance: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub composite: Option<bool>,
    /// Shorter sampling chains for quick previews; the full chain by default.
    #[serde(default)]
    pub steps: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Submitted {
    pub job_id: String,
    pub status_url: String,
}

fn json_body<T>(body: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    body.map(|Json(b)| b).map_err(|r| {
        if r.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "E_TOO_LARGE", r.body_text())
        } else {
            ApiError::bad_request("E_BAD_JSON", r.body_text())
        }
    })
}

/// Accepts raw base64 or a `data:` URL.
fn decode_base64(field: &str, s: &str) -> Result<Vec<u8>, ApiError> {
    let payload = match s.split_once(";base64,") {
        Some((prefix, rest)) if prefix.starts_with("data:") => rest,
        _ => s,
    };
    base64::engine::general_purpose::STANDARD
        .decode(payload.trim())
        .map_err(|e| ApiError::bad_request("E_BAD_BASE64", format!("{field}: {e}")))
}

fn decode_image(s: &str) -> Result<ImageTensor, ApiError> {
    ImageTensor::from_png_bytes(&decode_base64("image", s)?)
        .map_err(|e| ApiError::bad_request("E_BAD_IMAGE", format!("image: {e}")))
}

fn decode_mask(s: &str) -> Result<MaskTensor, ApiError> {
    MaskTensor::from_png_bytes(&decode_base64("mask", s)?)
        .map_err(|e| ApiError::bad_request("E_BAD_IMAGE", format!("mask: {e}")))
}

async fn submit_inpaint(
    State(state): State<AppState>,
    body: Result<Json<InpaintBody>, JsonRejection>,
) -> Result<(StatusCode, Json<Submitted>), ApiError> {
    let body = json_body(body)?;
    let image = decode_image(&body.image)?;
    let mask = decode_mask(&body.mask)?;
    if (mask.height(), mask.width()) != (image.height(), image.width()) {
        return Err(ApiError::bad_request(
            "E_MASK_SIZE",
            format!(
                "mask is {}x{} but image is {}x{}",
                mask.height(),
                mask.width(),
                image.height(),
                image.width()
            ),
        ));
    }
    if mask.is_empty() {
        return Err(ApiError::bad_request("E_EMPTY_MASK", "mask selects no pixels"));
    }
    let guidance = body.guidance.unwrap_or(DEFAULT_GUIDANCE);
    if !(guidance.is_finite() && guidance >= 0.0) {
        return Err(ApiError::bad_request("E_ARGS", format!("guidance must be ≥ 0, got {guidance}")));
    }
    if body.steps == Some(0) {
        return Err(ApiError::bad_request("E_ARGS", "steps must be ≥ 1"));
    }
    let concept = state.concept(&body.concept_id).ok_or_else(|| {
        ApiError::not_found("E_UNKNOWN_CONCEPT", format!("no concept `{}`", body.concept_id))
    })?;
    let f = dreampaint_core::sampler::codec_for(&concept.checkpoint)
        .map_err(|e| ApiError::internal(e.to_string()))?
        .factor();
    if image.height() % f != 0 || image.width() % f != 0 {
        return Err(ApiError::bad_request(
            "E_IMAGE_SIZE",
            format!("image sides must be multiples of {f}"),
        ));
    }
    let prompt = jobs::concept_prompt(&concept, body.prompt_extra.as_deref())
        .map_err(|e| ApiError::bad_request("E_ARGS", e.to_string()))?;
    let params = JobParams {
        concept_id: body.concept_id.clone(),
        prompt,
        prompt_extra: body.prompt_extra.clone(),
        guidance,
        seed: body.seed.unwrap_or(0),
        composite: body.composite.unwrap_or(true),
        steps: body.steps,
        width: image.width(),
        height: image.height(),
    };
    let job = state.0.queue.submit(params, image, mask, concept).map_err(|e| match e {
        jobs::SubmitError::QueueFull(limit) => ApiError::new(
            StatusCode::TOO_MANY_REQUESTS,
            "E_QUEUE_FULL",
            format!("{limit} jobs already queued"),
        ),
        jobs::SubmitError::Stopped => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "E_STOPPED", "service is shutting down"),
    })?;
    Ok((
        StatusCode::ACCEPTED,
        Json(Submitted {
            status_url: format!("/api/jobs/{}", job.id),
            job_id: job.id,
        }),
    ))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EchoBody {
    pub mask: String,
}

/// Returns the mask exactly as the server rasterizes it.
async fn echo_mask(body: Result<Json<EchoBody>, JsonRejection>) -> Result<Response, ApiError> {
    let mask = decode_mask(&json_body(body)?.mask)?;
    let bytes = mask.to_png_bytes().map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(png(bytes))
}

fn unknown_job(id: &str) -> ApiError {
    ApiError::not_found("E_UNKNOWN_JOB", format!("no job `{id}`"))
}

async fn job_status(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Job>, ApiError> {
    state.0.queue.get(&id).map(Json).ok_or_else(|| unknown_job(&id))
}

async fn job_result(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let job = state.0.queue.get(&id).ok_or_else(|| unknown_job(&id))?;
    match job.state {
        JobState::Done => {
            let bytes = tokio::fs::read(state.0.queue.result_path(&id))
                .await
                .map_err(|e| ApiError::internal(format!("result of {id}: {e}")))?;
            Ok(png(bytes))
        }
        JobState::Failed => Err(ApiError::new(
            StatusCode::CONFLICT,
            "E_JOB_FAILED",
            job.error.map(|e| e.message).unwrap_or_default(),
        )),
        JobState::Queued | JobState::Running => Err(ApiError::new(
            StatusCode::CONFLICT,
            "E_NOT_READY",
            format!("job {id} is {:?}", job.state).to_lowercase(),
        )),
    }
}
