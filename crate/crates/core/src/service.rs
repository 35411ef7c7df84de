//! HTTP generation service.
//!
//! * `POST /generate`: [`GenerationRequest`] JSON → `{images, seed_used, class_id, timings_ms}`
//! * `GET /health`: `{status, checkpoints}`
//! * `GET /meta`: `{classes, image_size, control_available, prompt_templates, max_count}`
//!
//! Errors are `{"error": {"kind", "field"?, "message"}}` with status 400 for
//! invalid requests, 409 for masks without a control checkpoint and 503 while
//! checkpoints load.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;
use tower_http::cors::CorsLayer;

use crate::data::{prompt_templates, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::generate::{generate, GenerationRequest, Models, Timings, MAX_COUNT};

pub const DEFAULT_PORT: u16 = 8733;
pub const ENV_CODEC: &str = "SONODIFF_CODEC";
pub const ENV_DIFFUSION: &str = "SONODIFF_DIFFUSION";
pub const ENV_CONTROL: &str = "SONODIFF_CONTROL";
pub const ENV_PORT: &str = "SONODIFF_PORT";

fn default_host() -> String {
    "127.0.0.1".into()
}

fn default_port() -> u16 {
    DEFAULT_PORT
}

fn default_concurrency() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default)]
    pub codec: PathBuf,
    #[serde(default)]
    pub diffusion: PathBuf,
    #[serde(default)]
    pub control: Option<PathBuf>,
    #[serde(default = "default_host")]
    pub host: String,
    #[serde(default = "default_port")]
    pub port: u16,
    /// Generation jobs running at once; further requests wait.
    #[serde(default = "default_concurrency")]
    pub max_concurrent: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            codec: PathBuf::new(),
            diffusion: PathBuf::new(),
            control: None,
            host: default_host(),
            port: DEFAULT_PORT,
            max_concurrent: default_concurrency(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("service config: {e}")))
    }

    /// Reads a TOML config; relative checkpoint paths resolve against its directory.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let dir = path.parent().unwrap_or(std::path::Path::new(""));
        for p in [&mut cfg.codec, &mut cfg.diffusion].into_iter().chain(cfg.control.as_mut()) {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Overrides checkpoint paths and port from `SONODIFF_*` variables
    /// looked up through `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(v) = var(ENV_CODEC) {
            self.codec = v.into();
        }
        if let Some(v) = var(ENV_DIFFUSION) {
            self.diffusion = v.into();
        }
        if let Some(v) = var(ENV_CONTROL) {
            self.control = (!v.is_empty()).then(|| v.into());
        }
        if let Some(v) = var(ENV_PORT) {
            self.port = v.parse().map_err(|_| Error::InvalidArgument(format!("{ENV_PORT}={v} is not a port")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.codec.as_os_str().is_empty() || self.diffusion.as_os_str().is_empty() {
            return Err(Error::InvalidArgument(format!(
                "codec and diffusion checkpoint paths are required (config or {ENV_CODEC}/{ENV_DIFFUSION})"
            )));
        }
        if self.max_concurrent == 0 {
            return Err(Error::InvalidArgument("max_concurrent must be ≥ 1".into()));
        }
        Ok(())
    }
}

enum LoadState {
    Loading,
    Ready(Arc<Models>),
    Failed(String),
}

struct Shared {
    state: RwLock<LoadState>,
    permits: Semaphore,
}

/// Handle to the service state; cheap to clone.
#[derive(Clone)]
pub struct Service {
    shared: Arc<Shared>,
}

#[derive(Debug, Serialize)]
pub struct GenerateResponse {
    pub images: Vec<String>,
    pub seed_used: u64,
    pub class_id: usize,
    pub timings_ms: Timings,
}

struct ApiError {
    status: StatusCode,
    kind: &'static str,
    field: Option<String>,
    message: String,
}

impl ApiError {
    fn unavailable(message: impl Into<String>) -> Self {
        Self { status: StatusCode::SERVICE_UNAVAILABLE, kind: "loading", field: None, message: message.into() }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidField { field, message } => {
                Self { status: StatusCode::BAD_REQUEST, kind: "invalid_field", field: Some(field), message }
            }
            Error::ControlUnavailable => Self {
                status: StatusCode::CONFLICT,
                kind: "control_unavailable",
                field: Some("mask".into()),
                message: "load a control checkpoint to use masks".into(),
            },
            other => Self { status: StatusCode::INTERNAL_SERVER_ERROR, kind: other.kind(), field: None, message: other.to_string() },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut err = json!({ "kind": self.kind, "message": self.message });
        if let Some(f) = self.field {
            err["field"] = json!(f);
        }
        (self.status, Json(json!({ "error": err }))).into_response()
    }
}

impl Service {
    /// A service whose checkpoints are still loading.
    pub fn loading(max_concurrent: usize) -> Self {
        Self {
            shared: Arc::new(Shared {
                state: RwLock::new(LoadState::Loading),
                permits: Semaphore::new(max_concurrent.max(1)),
            }),
        }
    }

    pub fn ready(models: Models, max_concurrent: usize) -> Self {
        let s = Self::loading(max_concurrent);
        s.finish_loading(Ok(models));
        s
    }

    pub fn finish_loading(&self, result: Result<Models>) {
        let next = match result {
            Ok(m) => LoadState::Ready(Arc::new(m)),
            Err(e) => LoadState::Failed(e.to_string()),
        };
        *self.shared.state.write().expect("state lock") = next;
    }

    fn models(&self) -> std::result::Result<Arc<Models>, ApiError> {
        match &*self.shared.state.read().expect("state lock") {
            LoadState::Ready(m) => Ok(m.clone()),
            LoadState::Loading => Err(ApiError::unavailable("checkpoints are loading")),
            LoadState::Failed(e) => Err(ApiError::unavailable(format!("checkpoints failed to load: {e}"))),
        }
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/generate", post(generate_handler))
            .route("/health", get(health))
            .route("/meta", get(meta))
            .layer(CorsLayer::permissive())
            .with_state(self.clone())
    }
}

async fn health(State(svc): State<Service>) -> Response {
    match &*svc.shared.state.read().expect("state lock") {
        LoadState::Ready(m) => Json(json!({ "status": "ok", "checkpoints": m.hashes })).into_response(),
        LoadState::Loading => {
            (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "loading", "checkpoints": {} }))).into_response()
        }
        LoadState::Failed(e) => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({ "status": "error", "checkpoints": {}, "message": e })),
        )
            .into_response(),
    }
}

async fn meta(State(svc): State<Service>) -> std::result::Result<Response, ApiError> {
    let m = svc.models()?;
    Ok(Json(json!({
        "classes": CLASS_NAMES,
        "image_size": m.image_size(),
        "control_available": m.control.is_some(),
        "prompt_templates": prompt_templates(),
        "max_count": MAX_COUNT,
    }))
    .into_response())
}

fn parse_request(body: &[u8]) -> std::result::Result<GenerationRequest, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." || path == "?" { "body".to_string() } else { path };
        Error::InvalidField { field, message: e.inner().to_string() }.into()
    })
}

async fn generate_handler(State(svc): State<Service>, body: Bytes) -> std::result::Result<Json<GenerateResponse>, ApiError> {
    let req = parse_request(&body)?;
    let models = svc.models()?;
    req.validate()?;
    let _permit = svc.shared.permits.acquire().await.map_err(|_| ApiError::unavailable("service shutting down"))?;
    let out = tokio::task::spawn_blocking(move || generate(&models, &req))
        .await
        .map_err(|e| ApiError::from(Error::Format(format!("generation task failed: {e}"))))??;
    let b64 = base64::engine::general_purpose::STANDARD;
    Ok(Json(GenerateResponse {
        images: out.pngs.iter().map(|p| b64.encode(p)).collect(),
        seed_used: out.seed_used,
        class_id: out.class_id,
        timings_ms: out.timings,
    }))
}

/// Binds, starts loading checkpoints in the background and serves until the
/// process ends.
pub async fn serve(cfg: ServiceConfig) -> Result<()> {
    cfg.validate()?;
    let addr: SocketAddr = format!("{}:{}", cfg.host, cfg.port)
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad listen address {}:{}", cfg.host, cfg.port)))?;
    let svc = Service::loading(cfg.max_concurrent);
    let loader = svc.clone();
    let paths = cfg.clone();
    tokio::task::spawn_blocking(move || {
        loader.finish_loading(Models::load(&paths.codec, &paths.diffusion, paths.control.as_deref()));
    });
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::io(addr.to_string(), e))?;
    axum::serve(listener, svc.router()).await.map_err(|e| Error::io(addr.to_string(), e))
}
