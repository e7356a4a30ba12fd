//! HTTP API backing the annotation tool.
//!
//! Everything lives as plain files under the data root:
//!
//! - volumes: `{root}/{id}.vmeta` plus their `.raw` payloads
//! - annotations: `{root}/annotations/{visit}.json`, falling back to
//!   `{root}/{visit}_points.json` (the layout `synth` writes)
//! - registration results: `{root}/results/{job_id}.json`

use std::collections::HashMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use curvereg::keycurve::{
    fit_all, prediction_band, AnnotationSet, PredictionBand, SelectionUncertainty, DEFAULT_SAMPLES,
};
use curvereg::register::{register_with_progress, RegistrationConfig, RegistrationResult};
use curvereg::volume::{load_volume, ChannelLabel, VoxelGrid};
use curvereg::warp::Transform;
use curvereg::Error;

use crate::render::{data_window, overlay_png, parse_window, slice_png};
use crate::CurveInput;

/// Error response: `{"error": name, "message": text}` with a status code.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub name: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, name: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            name: name.to_string(),
            message: message.into(),
        }
    }

    fn not_found(what: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "NotFound", what)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }

    /// Domain failure of a library call.
    fn domain(e: Error) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.name(), e.to_string())
    }

    fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.name, "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub session: String,
    pub state: JobState,
    pub progress: f64,
    /// Result file, relative to the data root, once done.
    pub result: Option<String>,
    pub error: Option<String>,
}

impl JobStatus {
    fn active(&self) -> bool {
        matches!(self.state, JobState::Queued | JobState::Running)
    }
}

/// Server state shared by all handlers.
pub struct AppState {
    root: PathBuf,
    volumes: Mutex<HashMap<String, Arc<VoxelGrid>>>,
    annotation_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    jobs: Arc<Mutex<HashMap<String, JobStatus>>>,
    workers: Arc<Semaphore>,
    next_job: AtomicU64,
}

type Shared = Arc<AppState>;

impl AppState {
    pub fn new(root: impl Into<PathBuf>, workers: usize) -> Self {
        AppState {
            root: root.into(),
            volumes: Mutex::new(HashMap::new()),
            annotation_locks: Mutex::new(HashMap::new()),
            jobs: Arc::new(Mutex::new(HashMap::new())),
            workers: Arc::new(Semaphore::new(workers.max(1))),
            next_job: AtomicU64::new(1),
        }
    }

    fn volume_path(&self, id: &str) -> ApiResult<PathBuf> {
        check_id(id)?;
        let path = self.root.join(format!("{id}.vmeta"));
        if path.is_file() {
            Ok(path)
        } else {
            Err(ApiError::not_found(format!("volume {id}")))
        }
    }

    async fn volume(&self, id: &str) -> ApiResult<Arc<VoxelGrid>> {
        if let Some(v) = self.volumes.lock().unwrap().get(id) {
            return Ok(v.clone());
        }
        let path = self.volume_path(id)?;
        let grid = tokio::task::spawn_blocking(move || load_volume(path))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))?
            .map_err(ApiError::domain)?;
        let grid = Arc::new(grid);
        self.volumes.lock().unwrap().insert(id.to_string(), grid.clone());
        Ok(grid)
    }

    fn annotation_write_path(&self, visit: &str) -> PathBuf {
        self.root.join("annotations").join(format!("{visit}.json"))
    }

    fn annotation_path(&self, visit: &str) -> ApiResult<PathBuf> {
        check_id(visit)?;
        let primary = self.annotation_write_path(visit);
        if primary.is_file() {
            return Ok(primary);
        }
        let fallback = self.root.join(format!("{visit}_points.json"));
        if fallback.is_file() {
            return Ok(fallback);
        }
        Err(ApiError::not_found(format!("annotations for visit {visit}")))
    }

    fn annotations(&self, visit: &str) -> ApiResult<AnnotationSet> {
        let path = self.annotation_path(visit)?;
        AnnotationSet::load(path).map_err(ApiError::domain)
    }

    fn annotation_lock(&self, visit: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.annotation_locks
            .lock()
            .unwrap()
            .entry(visit.to_string())
            .or_default()
            .clone()
    }

    fn result_path(&self, job_id: &str) -> PathBuf {
        self.root.join("results").join(format!("{job_id}.json"))
    }

    pub fn job(&self, id: &str) -> Option<JobStatus> {
        self.jobs.lock().unwrap().get(id).cloned()
    }
}

/// Identifiers become file names, so only a conservative character set is
/// accepted; anything else cannot name a stored object.
fn check_id(id: &str) -> ApiResult<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(ApiError::not_found(format!("invalid id {id:?}")))
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename,
/// so readers see either the old or the new file.
fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

/// The API routes, nested under `prefix` when it is not empty.
pub fn router(state: Shared, prefix: &str) -> Router {
    let routes = Router::new()
        .route("/volumes", get(list_volumes))
        .route("/volumes/{id}/slice", get(get_slice))
        .route("/volumes/{id}/overlay", get(get_overlay))
        .route("/annotations/{visit}", get(get_annotations).put(put_annotations))
        .route("/fit", post(fit))
        .route("/score", post(score))
        .route("/register", post(start_register))
        .route("/jobs/{id}", get(get_job))
        .with_state(state);
    let prefix = prefix.trim_end_matches('/');
    if prefix.is_empty() {
        routes
    } else if prefix.starts_with('/') {
        Router::new().nest(prefix, routes)
    } else {
        Router::new().nest(&format!("/{prefix}"), routes)
    }
}

/// Router over `root` with a worker pool sized from `CURVEREG_THREADS`.
pub fn app(root: impl Into<PathBuf>, prefix: &str) -> Router {
    let workers = crate::thread_limit()
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    router(Arc::new(AppState::new(root, workers)), prefix)
}

/// Runs the server until the process is stopped.
pub fn serve_blocking(root: PathBuf, host: &str, port: u16, prefix: &str) -> curvereg::Result<()> {
    if !root.is_dir() {
        return Err(Error::MissingFile(root));
    }
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| Error::InvalidConfig(format!("address {host}:{port}: {e}")))?;
    let io = |e: std::io::Error| Error::IoFailure {
        path: PathBuf::from(addr.to_string()),
        source: e,
    };
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(io)?;
    let app = app(root, prefix);
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(io)?;
        axum::serve(listener, app).await.map_err(io)
    })
}

#[derive(Debug, Serialize)]
struct VolumeInfo {
    id: String,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    channels: Vec<ChannelLabel>,
}

async fn list_volumes(State(state): State<Shared>) -> ApiResult<Json<Vec<VolumeInfo>>> {
    let entries = std::fs::read_dir(&state.root).map_err(|e| ApiError::internal(e.to_string()))?;
    let mut ids: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".vmeta").map(str::to_string)
        })
        .filter(|id| check_id(id).is_ok())
        .collect();
    ids.sort();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let Ok(grid) = state.volume(&id).await else {
            continue;
        };
        let g = grid.geometry();
        out.push(VolumeInfo {
            id,
            dims: g.dims,
            spacing_mm: g.spacing,
            origin_mm: g.origin,
            channels: grid.labels(),
        });
    }
    Ok(Json(out))
}

#[derive(Debug, Deserialize)]
struct SliceQuery {
    channel: Option<String>,
    z: usize,
    window: Option<String>,
}

fn channel_data<'a>(grid: &'a VoxelGrid, label: ChannelLabel) -> ApiResult<&'a [f32]> {
    grid.data(label)
        .map_err(|_| ApiError::not_found(format!("channel {label}")))
}

fn window_param(param: Option<&str>, data: &[f32]) -> ApiResult<(f32, f32)> {
    match param {
        Some(s) => parse_window(s).ok_or_else(|| ApiError::bad_request(format!("window {s:?}: expected lo,hi"))),
        None => Ok(data_window(data)),
    }
}

fn check_z(grid: &VoxelGrid, z: usize) -> ApiResult<()> {
    let nz = grid.dims()[2];
    if z < nz {
        Ok(())
    } else {
        Err(ApiError::not_found(format!("slice {z} (volume has {nz})")))
    }
}

async fn get_slice(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Response> {
    let grid = state.volume(&id).await?;
    let label: ChannelLabel = match q.channel.as_deref() {
        Some(s) => s.parse().map_err(|_| ApiError::bad_request(format!("unknown channel {s:?}")))?,
        None => ChannelLabel::Ct,
    };
    let data = channel_data(&grid, label)?;
    check_z(&grid, q.z)?;
    let window = window_param(q.window.as_deref(), data)?;
    let slice = grid.extract_slice(label, q.z, window).map_err(ApiError::domain)?;
    Ok(png(slice_png(&slice)))
}

#[derive(Debug, Deserialize)]
struct OverlayQuery {
    z: usize,
    alpha: Option<f32>,
    ct_window: Option<String>,
    pet_window: Option<String>,
}

async fn get_overlay(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<OverlayQuery>,
) -> ApiResult<Response> {
    let grid = state.volume(&id).await?;
    let alpha = q.alpha.unwrap_or(0.5);
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ApiError::bad_request(format!("alpha {alpha} outside [0, 1]")));
    }
    let ct_data = channel_data(&grid, ChannelLabel::Ct)?;
    let pet_data = channel_data(&grid, ChannelLabel::Pet)?;
    check_z(&grid, q.z)?;
    let ct_window = window_param(q.ct_window.as_deref(), ct_data)?;
    let pet_window = window_param(q.pet_window.as_deref(), pet_data)?;
    let ct = grid.extract_slice(ChannelLabel::Ct, q.z, ct_window).map_err(ApiError::domain)?;
    let pet = grid.extract_slice(ChannelLabel::Pet, q.z, pet_window).map_err(ApiError::domain)?;
    Ok(png(overlay_png(&ct, &pet, alpha)))
}

async fn get_annotations(State(state): State<Shared>, UrlPath(visit): UrlPath<String>) -> ApiResult<Response> {
    let path = state.annotation_path(&visit)?;
    let bytes = std::fs::read(&path).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn put_annotations(
    State(state): State<Shared>,
    UrlPath(visit): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<AnnotationSet>> {
    check_id(&visit)?;
    let set: AnnotationSet = parse_body(&body)?;
    if set.visit_id != visit {
        return Err(ApiError::bad_request(format!(
            "visit_id {:?} does not match {visit:?}",
            set.visit_id
        )));
    }
    for p in &set.points {
        p.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    }
    let text = serde_json::to_string_pretty(&set).map_err(|e| ApiError::internal(e.to_string()))?;
    let lock = state.annotation_lock(&visit);
    let _guard = lock.lock().await;
    let path = state.annotation_write_path(&visit);
    tokio::task::spawn_blocking(move || write_atomic(&path, text.as_bytes()))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(set))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitRequest {
    visit: String,
    /// Where to evaluate prediction bands; defaults to each curve's
    /// annotated z values.
    z_mm: Option<Vec<f64>>,
    selection: Option<SelectionUncertainty>,
}

async fn fit(State(state): State<Shared>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: FitRequest = parse_body(&body)?;
    let set = state.annotations(&req.visit)?;
    let curves = fit_all(&set).map_err(ApiError::domain)?;
    let selection = req.selection.unwrap_or_default();
    let groups = set.by_curve();
    let mut bands: HashMap<&str, Vec<PredictionBand>> = HashMap::new();
    for (id, curve) in &curves.curves {
        let zs: Vec<f64> = match &req.z_mm {
            Some(z) => z.clone(),
            None => {
                let mut z: Vec<f64> = groups.get(id.as_str()).map_or(Vec::new(), |pts| pts.iter().map(|p| p.z).collect());
                z.sort_by(f64::total_cmp);
                z.dedup();
                z
            }
        };
        bands.insert(id, zs.iter().map(|&z| prediction_band(curve, z, selection)).collect());
    }
    Ok(Json(json!({
        "visit_id": curves.visit_id,
        "curves": curves.curves,
        "bands": bands,
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreRequest {
    src: String,
    tgt: String,
    /// A transform object, or the id of a finished registration job.
    transform: Option<Value>,
    samples: Option<usize>,
}

async fn score(State(state): State<Shared>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: ScoreRequest = parse_body(&body)?;
    let src = state.annotations(&req.src)?;
    let tgt = state.annotations(&req.tgt)?;
    let transform = match req.transform {
        None | Some(Value::Null) => None,
        Some(Value::String(job)) => {
            check_id(&job)?;
            let path = state.result_path(&job);
            if !path.is_file() {
                return Err(ApiError::not_found(format!("result of job {job}")));
            }
            Some(RegistrationResult::load(path).map_err(ApiError::domain)?.transform)
        }
        Some(v) => Some(serde_json::from_value::<Transform>(v).map_err(|e| ApiError::bad_request(e.to_string()))?),
    };
    let samples = req.samples.unwrap_or(DEFAULT_SAMPLES);
    let report = tokio::task::spawn_blocking(move || -> curvereg::Result<_> {
        if let Some(t) = &transform {
            t.validate()?;
        }
        let a = CurveInput::Points(src).curves(transform.as_ref())?;
        let b = CurveInput::Points(tgt).curves(None)?;
        curvereg::keycurve::rmse(&a, &b, samples)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
    .map_err(ApiError::domain)?;
    Ok(Json(serde_json::to_value(report).map_err(|e| ApiError::internal(e.to_string()))?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegisterRequest {
    src: String,
    tgt: String,
    #[serde(default)]
    config: Option<RegistrationConfig>,
    /// Defaults to `"{src}:{tgt}"`.
    session: Option<String>,
}

async fn start_register(State(state): State<Shared>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: RegisterRequest = parse_body(&body)?;
    let cfg = req.config.unwrap_or_default();
    cfg.validate().map_err(ApiError::domain)?;
    state.volume_path(&req.src)?;
    state.volume_path(&req.tgt)?;
    let session = req.session.unwrap_or_else(|| format!("{}:{}", req.src, req.tgt));

    let job_id = {
        let mut jobs = state.jobs.lock().unwrap();
        if let Some(running) = jobs.values().find(|j| j.session == session && j.active()) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "JobRunning",
                format!("job {} already running for session {session}", running.job_id),
            ));
        }
        let job_id = format!("job-{}", state.next_job.fetch_add(1, Ordering::SeqCst));
        jobs.insert(
            job_id.clone(),
            JobStatus {
                job_id: job_id.clone(),
                session,
                state: JobState::Queued,
                progress: 0.0,
                result: None,
                error: None,
            },
        );
        job_id
    };

    let task_state = state.clone();
    let id = job_id.clone();
    tokio::spawn(async move {
        let outcome = run_job(&task_state, &id, &req.src, &req.tgt, cfg).await;
        let mut jobs = task_state.jobs.lock().unwrap();
        if let Some(job) = jobs.get_mut(&id) {
            match outcome {
                Ok(result) => {
                    job.state = JobState::Done;
                    job.progress = 1.0;
                    job.result = Some(result);
                }
                Err(message) => {
                    job.state = JobState::Failed;
                    job.error = Some(message);
                }
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id }))))
}

/// Waits for a worker, registers and stores the result; returns the result
/// path relative to the root.
async fn run_job(state: &Shared, id: &str, src: &str, tgt: &str, cfg: RegistrationConfig) -> Result<String, String> {
    let _permit = state.workers.clone().acquire_owned().await.map_err(|e| e.to_string())?;
    let set_running = |jobs: &mut HashMap<String, JobStatus>| {
        if let Some(job) = jobs.get_mut(id) {
            job.state = JobState::Running;
        }
    };
    set_running(&mut state.jobs.lock().unwrap());
    let src = state.volume(src).await.map_err(|e| format!("{}: {}", e.name, e.message))?;
    let tgt = state.volume(tgt).await.map_err(|e| format!("{}: {}", e.name, e.message))?;
    let jobs = state.jobs.clone();
    let job_id = id.to_string();
    let path = state.result_path(id);
    tokio::task::spawn_blocking(move || {
        let progress = |f: f64| {
            if let Some(job) = jobs.lock().unwrap().get_mut(&job_id) {
                job.progress = job.progress.max(f.min(0.99));
            }
        };
        let result = register_with_progress(&src, &tgt, &cfg, None, &progress)
            .map_err(|e| format!("{}: {e}", e.name()))?;
        let text = serde_json::to_string_pretty(&result).map_err(|e| e.to_string())?;
        write_atomic(&path, text.as_bytes()).map_err(|e| e.to_string())?;
        Ok(format!("results/{job_id}.json"))
    })
    .await
    .map_err(|e| e.to_string())?
}

async fn get_job(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<JobStatus>> {
    state
        .job(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("job {id}")))
}
