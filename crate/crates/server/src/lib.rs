//! HTTP render service. It stores encrypted volumes and renders them with
//! the public key embedded in each container. Private key material never
//! reaches this crate.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use cipherray_core::{EncVolume, Error as CoreError, RenderRequest};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::json;

pub mod store;

pub use store::{VolumeRecord, VolumeStore};

#[derive(Debug, Clone, clap::Args)]
pub struct Config {
    /// Address to listen on.
    #[arg(long, env = "CIPHERRAY_BIND", default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Directory holding uploaded `.cvol` files.
    #[arg(long, env = "CIPHERRAY_DATA_DIR", default_value = "cipherray-data")]
    pub data_dir: PathBuf,
    /// Largest image rendered synchronously, in pixels.
    #[arg(long, env = "CIPHERRAY_PIXEL_BUDGET", default_value_t = 128 * 128)]
    pub pixel_budget: usize,
    /// Largest image accepted at all (async jobs), in pixels.
    #[arg(long, env = "CIPHERRAY_MAX_PIXELS", default_value_t = 1024 * 1024)]
    pub max_pixels: usize,
    /// Render worker threads.
    #[arg(long, env = "CIPHERRAY_WORKERS", default_value_t = default_workers())]
    pub workers: usize,
    /// Largest accepted upload, in bytes.
    #[arg(long, env = "CIPHERRAY_MAX_UPLOAD", default_value_t = 4 << 30)]
    pub max_upload: usize,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl Config {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Config {
            bind: ([127, 0, 0, 1], 0).into(),
            data_dir: data_dir.into(),
            pixel_budget: 128 * 128,
            max_pixels: 1024 * 1024,
            workers: default_workers(),
            max_upload: 4 << 30,
        }
    }
}

enum Job {
    Pending,
    Done(Bytes),
    Failed(StatusCode, String),
}

pub struct AppState {
    config: Config,
    store: VolumeStore,
    pool: rayon::ThreadPool,
    jobs: Mutex<HashMap<String, Job>>,
}

type Shared = Arc<AppState>;

impl AppState {
    pub fn new(config: Config) -> anyhow::Result<Shared> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers.max(1))
            .thread_name(|i| format!("render-{i}"))
            .build()?;
        Ok(Arc::new(AppState {
            store: VolumeStore::open(&config.data_dir)?,
            config,
            pool,
            jobs: Mutex::new(HashMap::new()),
        }))
    }
}

pub fn router(state: Shared) -> Router {
    let limit = state.config.max_upload;
    Router::new()
        .route("/volumes", put(upload).get(list))
        .route("/volumes/{id}", axum::routing::delete(remove))
        .route("/volumes/{id}/data", get(download))
        .route("/volumes/{id}/render", post(render_sync))
        .route("/volumes/{id}/render_async", post(render_async))
        .route("/jobs/{job}", get(job_status))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Binds and serves until the process is stopped.
pub async fn serve(config: Config) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, workers = config.workers, "listening");
    let app = router(AppState::new(config)?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Starts a server on a background runtime and returns its address.
pub fn spawn(config: Config) -> anyhow::Result<SocketAddr> {
    let std_listener = std::net::TcpListener::bind(config.bind)?;
    std_listener.set_nonblocking(true)?;
    let addr = std_listener.local_addr()?;
    let app = router(AppState::new(config)?);
    std::thread::Builder::new().name("cipherray-server".into()).spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .expect("tokio runtime");
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
            axum::serve(listener, app).await.expect("server");
        });
    })?;
    Ok(addr)
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn status_for(e: &CoreError) -> StatusCode {
    match e {
        CoreError::ModeMismatch { .. }
        | CoreError::PrecisionExhausted(_)
        | CoreError::DegenerateCamera(_)
        | CoreError::InvalidArgument(_)
        | CoreError::DimensionMismatch { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        CoreError::Format(_) | CoreError::FingerprintMismatch => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        ApiError(status_for(&e), e.to_string())
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

fn not_found(id: &str) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, format!("unknown id {id}"))
}

async fn upload(State(state): State<Shared>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let st = state.clone();
    let record = tokio::task::spawn_blocking(move || {
        let volume = EncVolume::from_bytes(&body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?;
        st.store.insert(&body, volume).map_err(internal)
    })
    .await
    .map_err(internal)??;
    tracing::info!(id = %record.id, dims = ?record.dims, encoding_dim = record.encoding_dim, "volume stored");
    Ok((StatusCode::CREATED, Json(json!({ "id": record.id }))))
}

async fn list(State(state): State<Shared>) -> Json<Vec<VolumeRecord>> {
    Json(state.store.list())
}

async fn remove(State(state): State<Shared>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    if state.store.remove(&id).map_err(internal)? {
        tracing::info!(%id, "volume deleted");
    }
    Ok(StatusCode::NO_CONTENT)
}

async fn download(State(state): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let path = state.store.path_of(&id).ok_or_else(|| not_found(&id))?;
    let bytes = tokio::task::spawn_blocking(move || std::fs::read(path))
        .await
        .map_err(internal)?
        .map_err(internal)?;
    Ok(octets(bytes.into()))
}

fn octets(bytes: Bytes) -> Response {
    ([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response()
}

/// Parses and checks a request against the volume and the size limits.
fn prepare(
    state: &AppState,
    id: &str,
    body: &[u8],
    budget: usize,
) -> Result<(Arc<EncVolume>, RenderRequest), ApiError> {
    let (_, volume) = state.store.get(id).ok_or_else(|| not_found(id))?;
    let req: RenderRequest =
        serde_json::from_slice(body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("bad request: {e}")))?;
    let pixels = req.camera.pixel_count();
    if pixels > budget {
        return Err(ApiError(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("{pixels} pixels exceed the limit of {budget}"),
        ));
    }
    cipherray_core::render::check_precision(&volume, &req)?;
    Ok((volume, req))
}

fn run_render(state: &AppState, volume: &EncVolume, req: &RenderRequest) -> Result<Bytes, ApiError> {
    let mut rng = ChaCha20Rng::from_entropy();
    let image = state.pool.install(|| cipherray_core::render(volume, req, &mut rng))?;
    Ok(image.to_bytes().into())
}

async fn render_sync(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let (volume, req) = prepare(&state, &id, &body, state.config.pixel_budget.min(state.config.max_pixels))?;
    tracing::info!(%id, mode = req.mode.name(), resolution = ?req.camera.resolution, "render");
    let st = state.clone();
    let bytes = tokio::task::spawn_blocking(move || run_render(&st, &volume, &req))
        .await
        .map_err(internal)??;
    Ok(octets(bytes))
}

async fn render_async(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<impl IntoResponse, ApiError> {
    let (volume, req) = prepare(&state, &id, &body, state.config.max_pixels)?;
    let job = uuid::Uuid::new_v4().simple().to_string();
    state.jobs.lock().expect("job lock").insert(job.clone(), Job::Pending);
    tracing::info!(%id, %job, mode = req.mode.name(), resolution = ?req.camera.resolution, "render job queued");
    let st = state.clone();
    let job_id = job.clone();
    tokio::task::spawn_blocking(move || {
        let outcome = match run_render(&st, &volume, &req) {
            Ok(bytes) => Job::Done(bytes),
            Err(ApiError(status, msg)) => Job::Failed(status, msg),
        };
        st.jobs.lock().expect("job lock").insert(job_id, outcome);
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job": job }))))
}

async fn job_status(State(state): State<Shared>, Path(job): Path<String>) -> Result<Response, ApiError> {
    let jobs = state.jobs.lock().expect("job lock");
    match jobs.get(&job) {
        None => Err(not_found(&job)),
        Some(Job::Pending) => Ok((StatusCode::ACCEPTED, Json(json!({ "status": "pending" }))).into_response()),
        Some(Job::Done(bytes)) => Ok(octets(bytes.clone())),
        Some(Job::Failed(status, msg)) => {
            Ok((*status, Json(json!({ "status": "failed", "error": msg }))).into_response())
        }
    }
}
