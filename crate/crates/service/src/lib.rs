//! HTTP JSON front end for snapping, sampling and interpolating shapes.
//!
//! Endpoints: `POST /api/snap`, `POST /api/generate`, `POST /api/interpolate`
//! and `GET /api/health`. Grids travel as base64 VXGB strings; snap requests
//! may also send dense `[D][H][W]` arrays of 0/1.

pub mod api;
pub mod config;
pub mod error;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, Request, State};
use axum::http::{HeaderName, HeaderValue, StatusCode, Uri};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Extension, Json, Router};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use tokio::sync::Semaphore;
use voxsnap_core::bundle::{load_model_dir, ModelBundle};
use voxsnap_core::dataset::Category;
use voxsnap_core::gan::{interpolate, sample_shapes};
use voxsnap_core::projection::{finish_grid, snap};
use voxsnap_core::voxel::{binarize, to_base64};

use crate::api::*;
use crate::config::ServiceConfig;
pub use crate::error::{ApiError, ErrorCode};

pub const REQUEST_ID_HEADER: HeaderName = HeaderName::from_static("x-request-id");
pub const WALL_TIME_HEADER: HeaderName = HeaderName::from_static("x-wall-time-ms");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Models(#[from] voxsnap_core::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("duplicate bundle for {0}")]
    DuplicateCategory(Category),
}

#[derive(Clone, Debug)]
pub struct RequestId(pub String);

/// Loaded bundles plus the queue that bounds concurrent model work.
#[derive(Clone)]
pub struct AppState {
    bundles: Arc<BTreeMap<Category, Arc<ModelBundle>>>,
    permits: Arc<Semaphore>,
    timeout: Duration,
}

impl AppState {
    /// Applies the per-category snap overrides of `cfg` to each bundle.
    pub fn new(bundles: Vec<ModelBundle>, cfg: &ServiceConfig) -> Result<Self, ServeError> {
        cfg.validate()?;
        let mut map = BTreeMap::new();
        for mut b in bundles {
            if let Some(o) = cfg.snap.get(&b.category) {
                b.snap.apply(o);
                b.snap.validate()?;
            }
            let cat = b.category;
            if map.insert(cat, Arc::new(b)).is_some() {
                return Err(ServeError::DuplicateCategory(cat));
            }
        }
        Ok(Self {
            bundles: Arc::new(map),
            // Tokio's semaphore hands out permits in request order.
            permits: Arc::new(Semaphore::new(cfg.max_concurrent)),
            timeout: Duration::from_secs_f64(cfg.timeout_secs),
        })
    }

    pub fn from_config(cfg: &ServiceConfig) -> Result<Self, ServeError> {
        let bundles = match &cfg.model_dir {
            Some(dir) => load_model_dir(dir)?,
            None => Vec::new(),
        };
        Self::new(bundles, cfg)
    }

    fn bundle(&self, category: &str, id: &str) -> Result<Arc<ModelBundle>, ApiError> {
        let missing = || ApiError::new(ErrorCode::ModelNotFound, format!("no model for category {category:?}"), id);
        let cat: Category = category.parse().map_err(|_| missing())?;
        self.bundles.get(&cat).cloned().ok_or_else(missing)
    }

    /// Runs `work` on the blocking pool once a permit is free, within the timeout.
    async fn run<T, F>(&self, id: &str, work: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce() -> voxsnap_core::Result<T> + Send + 'static,
    {
        let permits = Arc::clone(&self.permits);
        let job = async move {
            let permit = permits.acquire_owned().await.expect("semaphore never closed");
            tokio::task::spawn_blocking(move || {
                let _permit = permit;
                work()
            })
            .await
        };
        match tokio::time::timeout(self.timeout, job).await {
            Err(_) => Err(ApiError::new(ErrorCode::Internal, "request timed out", id)),
            Ok(Err(join)) => {
                tracing::error!(request_id = id, error = %join, "worker failed");
                Err(ApiError::internal(id))
            }
            Ok(Ok(result)) => result.map_err(|e| ApiError::from_core(e, id)),
        }
    }
}

/// `Json<T>` whose rejections become [`ApiError`]s.
pub struct ApiJson<T>(pub T);

impl<S, T> FromRequest<S> for ApiJson<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        let id = req
            .extensions()
            .get::<RequestId>()
            .map(|r| r.0.clone())
            .unwrap_or_default();
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(ApiJson(v)),
            Err(rejection) => {
                // Size violations keep 413; everything else is a plain 400.
                let status = match rejection.status() {
                    StatusCode::PAYLOAD_TOO_LARGE => StatusCode::PAYLOAD_TOO_LARGE,
                    _ => StatusCode::BAD_REQUEST,
                };
                let message = match &rejection {
                    JsonRejection::JsonDataError(e) => format!("invalid request: {}", e.body_text()),
                    other => other.body_text(),
                };
                Err(ApiError::bad_request(message, &id).with_status(status))
            }
        }
    }
}

/// Tags each request with an id, echoes it in a header and converts a
/// panicking handler into an `internal` error.
async fn request_id(mut req: Request, next: Next) -> Response {
    let id = uuid::Uuid::new_v4().to_string();
    req.extensions_mut().insert(RequestId(id.clone()));
    let mut resp = match tokio::spawn(next.run(req)).await {
        Ok(r) => r,
        Err(e) => {
            tracing::error!(request_id = %id, error = %e, "handler panicked");
            ApiError::internal(&id).into_response()
        }
    };
    if let Ok(v) = HeaderValue::from_str(&id) {
        resp.headers_mut().insert(REQUEST_ID_HEADER, v);
    }
    resp
}

async fn handle_snap(
    State(st): State<AppState>,
    Extension(RequestId(id)): Extension<RequestId>,
    ApiJson(req): ApiJson<SnapRequest>,
) -> Result<Response, ApiError> {
    let bundle = st.bundle(&req.category, &id)?;
    let grid = req.grid.to_grid().map_err(|e| ApiError::from_core(e, &id))?;
    if grid.dim() != bundle.resolution() {
        return Err(ApiError::new(
            ErrorCode::ResolutionMismatch,
            format!("grid is {0}^3 but the {1} model is {2}^3", grid.dim(), bundle.category, bundle.resolution()),
            &id,
        ));
    }
    let mut cfg = bundle.snap.clone();
    if let Some(o) = &req.overrides {
        cfg.apply(o);
    }
    cfg.validate().map_err(|e| ApiError::from_core(e, &id))?;
    let result = st.run(&id, move || snap(&grid, &bundle.models, &cfg)).await?;
    let wall_ms = result.metrics.wall_time * 1e3;
    let mut resp = Json(result.to_json()).into_response();
    if let Ok(v) = HeaderValue::from_str(&format!("{wall_ms:.3}")) {
        resp.headers_mut().insert(WALL_TIME_HEADER, v);
    }
    Ok(resp)
}

async fn handle_generate(
    State(st): State<AppState>,
    Extension(RequestId(id)): Extension<RequestId>,
    ApiJson(req): ApiJson<GenerateRequest>,
) -> Result<Json<GenerateResponse>, ApiError> {
    let bundle = st.bundle(&req.category, &id)?;
    let n = req.n.unwrap_or(1);
    if !(1..=MAX_GENERATE).contains(&n) {
        return Err(ApiError::bad_request(format!("n must be in 1..={MAX_GENERATE}, got {n}"), &id));
    }
    let seed = req.seed.unwrap_or_else(rand::random);
    let samples = st
        .run(&id, move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_shapes(&bundle.models.generator, n, &mut rng)?
                .into_iter()
                .map(|(z, g)| {
                    Ok(Sample {
                        z,
                        grid: to_base64(&finish_grid(&g, &bundle.snap)?),
                    })
                })
                .collect::<voxsnap_core::Result<Vec<_>>>()
        })
        .await?;
    Ok(Json(GenerateResponse { seed, samples }))
}

async fn handle_interpolate(
    State(st): State<AppState>,
    Extension(RequestId(id)): Extension<RequestId>,
    ApiJson(req): ApiJson<InterpolateRequest>,
) -> Result<Json<InterpolateResponse>, ApiError> {
    let bundle = st.bundle(&req.category, &id)?;
    let d = bundle.latent_dim();
    if req.z_a.len() != d || req.z_b.len() != d {
        return Err(ApiError::bad_request(
            format!("latent vectors must have {d} entries, got {} and {}", req.z_a.len(), req.z_b.len()),
            &id,
        ));
    }
    if req.z_a.iter().chain(&req.z_b).any(|v| !v.is_finite()) {
        return Err(ApiError::bad_request("latent vectors must be finite", &id));
    }
    if !(2..=MAX_INTERPOLATE_STEPS).contains(&req.steps) {
        return Err(ApiError::bad_request(
            format!("steps must be in 2..={MAX_INTERPOLATE_STEPS}, got {}", req.steps),
            &id,
        ));
    }
    let grids = st
        .run(&id, move || {
            let threshold = bundle.snap.threshold;
            interpolate(&bundle.models.generator, &req.z_b, &req.z_a, req.steps)?
                .iter()
                .map(|g| Ok(to_base64(&binarize(g, threshold)?)))
                .collect::<voxsnap_core::Result<Vec<_>>>()
        })
        .await?;
    Ok(Json(InterpolateResponse { grids }))
}

async fn handle_health(State(st): State<AppState>) -> Json<HealthResponse> {
    let models = st
        .bundles
        .values()
        .map(|b| ModelInfo {
            category: b.category.name().to_string(),
            resolution: b.resolution(),
            latent_dim: b.latent_dim(),
        })
        .collect();
    Json(HealthResponse {
        status: "ok".into(),
        models,
        version: VERSION.into(),
    })
}

async fn no_route(Extension(RequestId(id)): Extension<RequestId>, uri: Uri) -> ApiError {
    ApiError::new(ErrorCode::BadRequest, format!("no route for {}", uri.path()), &id)
        .with_status(StatusCode::NOT_FOUND)
}

async fn wrong_method(Extension(RequestId(id)): Extension<RequestId>, uri: Uri) -> ApiError {
    ApiError::new(ErrorCode::BadRequest, format!("method not allowed for {}", uri.path()), &id)
        .with_status(StatusCode::METHOD_NOT_ALLOWED)
}

pub fn router(state: AppState, cfg: &ServiceConfig) -> Router {
    let api = Router::new()
        .route("/api/snap", post(handle_snap))
        .route("/api/generate", post(handle_generate))
        .route("/api/interpolate", post(handle_interpolate))
        .route("/api/health", get(handle_health))
        .method_not_allowed_fallback(wrong_method);
    let app = match &cfg.static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api.fallback(no_route),
    };
    app.layer(DefaultBodyLimit::max(cfg.body_limit))
        .layer(middleware::from_fn(request_id))
        .with_state(state)
}

/// Loads the configured models and serves until ctrl-c.
pub async fn serve(cfg: ServiceConfig) -> Result<(), ServeError> {
    let state = AppState::from_config(&cfg)?;
    let listener = tokio::net::TcpListener::bind(&cfg.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, models = state.bundles.len(), "listening");
    axum::serve(listener, router(state, &cfg))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
