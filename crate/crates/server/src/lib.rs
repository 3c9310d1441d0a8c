//! HTTP/JSON service over a dataset directory and a model version store.
//!
//! Reads run concurrently. Dry runs hold a read lock on the refinement session
//! and park their report as the single pending commit; commit and checkout take
//! the write lock. Heavy work runs on the blocking pool.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use protoforge::datagen::{Dataset, Label, SampleSequence};
use protoforge::encoder::encode;
use protoforge::explain::{landmark_density, project_2d, prp_map, DensityHistogram, ProjectionMethod, PrpConfig};
use protoforge::metrics::MetricsReport;
use protoforge::pipeline::{load_dataset, render_model};
use protoforge::protonet::{ModelVersion, Prototype, PrototypeId, PrototypeSource};
use protoforge::refinery::{rank_candidates, Candidate, ImpactReport, RefinementOp, RefinementSession};
use protoforge::store::VersionStore;
use protoforge::video::{aggregate, predict_video, top_contributors, Aggregate, Contributor, PredictionTrace, VideoRecord, VideoSummary};
use protoforge::Error;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
    pub data_dir: PathBuf,
    pub store_dir: PathBuf,
    /// Where PNG renders are written and served from; defaults to `<store>/renders`.
    pub render_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::StaleReport(_) => StatusCode::CONFLICT,
            Error::InvalidArgument(_) | Error::Refinement(_) | Error::Shape(_) | Error::Config(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1, "status": self.0.as_u16() }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

struct Pending {
    token: String,
    report: ImpactReport,
}

pub struct AppState {
    data: Dataset,
    videos: Vec<VideoRecord>,
    session: RwLock<RefinementSession>,
    pending: Mutex<Option<Pending>>,
    traces: Mutex<HashMap<(String, String), Arc<PredictionTrace>>>,
    render_dir: PathBuf,
    counter: AtomicU64,
}

impl AppState {
    pub fn load(data_dir: &Path, store_dir: &Path, render_dir: Option<PathBuf>) -> protoforge::Result<Self> {
        let data = load_dataset(data_dir)?;
        let mut all = data.train.clone();
        all.extend(data.test.iter().cloned());
        let videos = protoforge::video::videos_from_samples(&all)?;
        let session = RefinementSession::open(VersionStore::open(store_dir)?)?;
        Ok(Self {
            data,
            videos,
            session: RwLock::new(session),
            pending: Mutex::new(None),
            traces: Mutex::new(HashMap::new()),
            render_dir: render_dir.unwrap_or_else(|| store_dir.join("renders")),
            counter: AtomicU64::new(0),
        })
    }

    fn session(&self) -> std::sync::RwLockReadGuard<'_, RefinementSession> {
        self.session.read().unwrap_or_else(|e| e.into_inner())
    }

    fn session_mut(&self) -> std::sync::RwLockWriteGuard<'_, RefinementSession> {
        self.session.write().unwrap_or_else(|e| e.into_inner())
    }

    fn model(&self, id: Option<&str>) -> Result<ModelVersion, ApiError> {
        let s = self.session();
        Ok(match id {
            Some(id) => s.version(id)?.clone(),
            None => s.current().clone(),
        })
    }

    fn sample(&self, id: &str) -> Result<&SampleSequence, ApiError> {
        self.data.find(id).ok_or_else(|| Error::NotFound(format!("sample {id}")).into())
    }

    fn video(&self, id: &str) -> Result<&VideoRecord, ApiError> {
        self.videos.iter().find(|v| v.id == id).ok_or_else(|| Error::NotFound(format!("video {id}")).into())
    }

    fn trace(&self, video: &str, model: Option<&str>) -> Result<Arc<PredictionTrace>, ApiError> {
        let m = self.model(model)?;
        let key = (m.id.clone(), video.to_string());
        if let Some(t) = self.traces.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok(t.clone());
        }
        let t = Arc::new(predict_video(&m, self.video(video)?)?);
        self.traces.lock().unwrap_or_else(|e| e.into_inner()).insert(key, t.clone());
        Ok(t)
    }
}

type Shared = Arc<AppState>;

async fn blocking<T: Send + 'static>(
    state: &Shared,
    f: impl FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    let state = state.clone();
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

pub fn router(state: Shared) -> Router {
    let renders = ServeDir::new(state.render_dir.clone());
    Router::new()
        .route("/health", get(|| async { Json(json!({ "status": "ok" })) }))
        .route("/v1/models", get(list_models))
        .route("/v1/models/{id}/metrics", get(model_metrics))
        .route("/v1/models/{id}/prototypes", get(model_prototypes))
        .route("/v1/models/{id}/landmark_density", get(model_density))
        .route("/v1/models/{id}/refine", post(refine))
        .route("/v1/models/{id}/commit", post(commit))
        .route("/v1/models/{id}/checkout", post(checkout))
        .route("/v1/prototypes/{id}/detail", get(prototype_detail))
        .route("/v1/prototypes/{id}/candidates", get(prototype_candidates))
        .route("/v1/embedding", get(embedding))
        .route("/v1/videos", get(list_videos))
        .route("/v1/videos/{id}/trace", get(video_trace))
        .route("/v1/videos/{id}/aggregate", get(video_aggregate))
        .nest_service("/renders", renders)
        .with_state(state)
}

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;

/// Loads the dataset and store, binds, and serves until Ctrl-C.
pub async fn serve(cfg: ServerConfig) -> Result<(), BoxError> {
    let state = Arc::new(AppState::load(&cfg.data_dir, &cfg.store_dir, cfg.render_dir.clone())?);
    let listener = tokio::net::TcpListener::bind((cfg.host.as_str(), cfg.port))
        .await
        .map_err(|e| format!("cannot bind {}:{}: {e}", cfg.host, cfg.port))?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct ModelEntry {
    id: String,
    parent_id: Option<String>,
    note: String,
    prototype_count: usize,
    head: bool,
}

async fn list_models(State(st): State<Shared>) -> ApiResult<Vec<ModelEntry>> {
    let s = st.session();
    let head = s.current().id.clone();
    Ok(Json(
        s.versions()
            .iter()
            .map(|v| ModelEntry {
                id: v.id.clone(),
                parent_id: v.parent_id.clone(),
                note: v.note.clone(),
                prototype_count: v.prototypes.len(),
                head: v.id == head,
            })
            .collect(),
    ))
}

async fn model_metrics(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<MetricsReport> {
    Ok(Json(blocking(&st, move |st| Ok(st.session().evaluate_version(&id)?)).await?))
}

#[derive(Debug, Serialize)]
struct PrototypeView {
    id: PrototypeId,
    class: Label,
    /// Weight toward the prototype's own class.
    weight: f32,
    /// `[pristine, manipulated]`.
    weights: [f32; 2],
    source: Option<PrototypeSource>,
    strip_url: String,
}

fn view(model: &ModelVersion, p: &Prototype) -> PrototypeView {
    let w = model.class_layer.weights[model.index_of(p.id).expect("prototype of this model")];
    PrototypeView {
        id: p.id,
        class: p.class,
        weight: w[p.class.index()],
        weights: w,
        source: p.source.clone(),
        strip_url: format!("/renders/{}/prototypes/{}.png", model.id, p.id),
    }
}

async fn model_prototypes(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Vec<PrototypeView>> {
    let m = st.model(Some(&id))?;
    Ok(Json(m.prototypes.iter().map(|p| view(&m, p)).collect()))
}

async fn model_density(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<DensityHistogram> {
    Ok(Json(landmark_density(&st.model(Some(&id))?)?))
}

#[derive(Debug, Deserialize)]
struct ModelQuery {
    model: Option<String>,
    count: Option<usize>,
}

fn parse_id(s: &str) -> Result<PrototypeId, ApiError> {
    Ok(s.parse()?)
}

#[derive(Debug, Serialize)]
struct PrpSummary {
    total: f64,
    rgb_mass: f64,
    flow_mass: f64,
    cells: Vec<((usize, usize), f64)>,
    overlay_url: String,
}

#[derive(Debug, Serialize)]
struct PrototypeDetail {
    model_id: String,
    #[serde(flatten)]
    prototype: PrototypeView,
    frames: Vec<String>,
    flow_renders: Vec<String>,
    prp: PrpSummary,
}

async fn prototype_detail(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ModelQuery>,
) -> ApiResult<PrototypeDetail> {
    let pid = parse_id(&id)?;
    Ok(Json(
        blocking(&st, move |st| {
            let m = st.model(q.model.as_deref())?;
            let p = m.prototype(pid)?.clone();
            let src = p
                .source
                .clone()
                .ok_or_else(|| Error::NotFound(format!("source patch of prototype {pid}")))?;
            let sample = st.sample(&src.sample_id)?;
            let dir = st.render_dir.join(&m.id);
            let marker = dir.join(format!("prp/{pid}.png"));
            if !marker.exists() {
                let mut single = m.clone();
                single.prototypes.retain(|x| x.id == pid);
                single.class_layer.weights = vec![m.class_layer.weights[m.index_of(pid).expect("present")]];
                render_model(&single, std::slice::from_ref(sample), &dir)?;
            }
            let latent = encode(sample, &m.encoder)?;
            let map = prp_map(&m, sample, &latent, pid, &PrpConfig::default())?;
            let url = |rel: String| format!("/renders/{}/{rel}", m.id);
            let frames: Vec<String> = (0..sample.k()).map(|t| url(format!("prototypes/{pid}/frame{t:02}.png"))).collect();
            Ok(PrototypeDetail {
                model_id: m.id.clone(),
                prototype: view(&m, &p),
                flow_renders: frames[1..].to_vec(),
                frames,
                prp: PrpSummary {
                    total: map.total,
                    rgb_mass: map.rgb_mass(),
                    flow_mass: map.flow_mass(),
                    cells: map.cells.clone(),
                    overlay_url: url(format!("prp/{pid}.png")),
                },
            })
        })
        .await?,
    ))
}

async fn prototype_candidates(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ModelQuery>,
) -> ApiResult<Vec<Candidate>> {
    let pid = parse_id(&id)?;
    Ok(Json(
        blocking(&st, move |st| {
            let m = st.model(q.model.as_deref())?;
            Ok(rank_candidates(&m, st.session().patch_index(), pid, q.count.unwrap_or(10))?)
        })
        .await?,
    ))
}

#[derive(Debug, Deserialize)]
struct EmbeddingQuery {
    model: Option<String>,
    include: Option<String>,
    method: Option<ProjectionMethod>,
    count: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct EmbeddingPoint {
    kind: &'static str,
    /// The prototype itself, or the prototype a candidate was retrieved for.
    prototype_id: PrototypeId,
    sample_id: Option<String>,
    cell: Option<(usize, usize)>,
    class: Label,
    x: f64,
    y: f64,
}

#[derive(Debug, Serialize)]
struct Embedding {
    model_id: String,
    method: ProjectionMethod,
    points: Vec<EmbeddingPoint>,
}

async fn embedding(State(st): State<Shared>, Query(q): Query<EmbeddingQuery>) -> ApiResult<Embedding> {
    Ok(Json(
        blocking(&st, move |st| {
            let m = st.model(q.model.as_deref())?;
            let include = q.include.as_deref().unwrap_or("prototypes");
            let parts: Vec<&str> = include.split(',').map(str::trim).collect();
            if let Some(bad) = parts.iter().find(|p| !matches!(**p, "prototypes" | "candidates")) {
                return Err(Error::InvalidArgument(format!("unknown include {bad:?}")).into());
            }
            let mut meta: Vec<(&'static str, PrototypeId, Option<String>, Option<(usize, usize)>, Label)> = Vec::new();
            let mut vectors = Vec::new();
            if parts.contains(&"prototypes") {
                for p in &m.prototypes {
                    meta.push(("prototype", p.id, p.source.as_ref().map(|s| s.sample_id.clone()), p.source.as_ref().map(|s| s.cell), p.class));
                    vectors.push(p.vector.clone());
                }
            }
            if parts.contains(&"candidates") {
                let session = st.session();
                let index = session.patch_index();
                let mut seen = std::collections::HashSet::new();
                for p in &m.prototypes {
                    for c in rank_candidates(&m, index, p.id, q.count.unwrap_or(5))? {
                        if seen.insert(c.reference()) {
                            vectors.push(index.get(&c.reference())?.vector.clone());
                            meta.push(("candidate", p.id, Some(c.source.sample_id.clone()), Some(c.source.cell), c.label));
                        }
                    }
                }
            }
            let method = q.method.unwrap_or_default();
            let xy = project_2d(&vectors, method, q.seed.unwrap_or(0))?;
            Ok(Embedding {
                model_id: m.id.clone(),
                method,
                points: meta
                    .into_iter()
                    .zip(xy)
                    .map(|((kind, prototype_id, sample_id, cell, class), [x, y])| EmbeddingPoint {
                        kind,
                        prototype_id,
                        sample_id,
                        cell,
                        class,
                        x,
                        y,
                    })
                    .collect(),
            })
        })
        .await?,
    ))
}

#[derive(Debug, Deserialize)]
struct RefineRequest {
    op: RefinementOp,
    #[serde(default = "yes")]
    dry_run: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Serialize)]
struct RefineResponse {
    /// Pass to `/commit` to adopt a dry run; absent once committed.
    token: Option<String>,
    committed_version: Option<String>,
    report: ImpactReport,
}

fn require_head(s: &RefinementSession, id: &str) -> Result<(), ApiError> {
    s.version(id)?;
    if s.current().id != id {
        return Err(ApiError(
            StatusCode::CONFLICT,
            format!("model {id} is not the session head {}; check it out first", s.current().id),
        ));
    }
    Ok(())
}

async fn refine(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<RefineRequest>,
) -> ApiResult<RefineResponse> {
    Ok(Json(
        blocking(&st, move |st| {
            if req.dry_run {
                let s = st.session();
                require_head(&s, &id)?;
                let report = s.dry_run(&req.op)?;
                let token = format!("{}:{}", report.token, st.counter.fetch_add(1, Ordering::Relaxed));
                *st.pending.lock().unwrap_or_else(|e| e.into_inner()) =
                    Some(Pending { token: token.clone(), report: report.clone() });
                Ok(RefineResponse { token: Some(token), committed_version: None, report })
            } else {
                let mut s = st.session_mut();
                require_head(&s, &id)?;
                let report = s.dry_run(&req.op)?;
                let version = s.commit(report.clone())?;
                *st.pending.lock().unwrap_or_else(|e| e.into_inner()) = None;
                Ok(RefineResponse { token: None, committed_version: Some(version), report })
            }
        })
        .await?,
    ))
}

#[derive(Debug, Deserialize)]
struct CommitRequest {
    token: String,
}

async fn commit(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<CommitRequest>,
) -> ApiResult<serde_json::Value> {
    Ok(Json(
        blocking(&st, move |st| {
            let mut s = st.session_mut();
            require_head(&s, &id)?;
            let mut pending = st.pending.lock().unwrap_or_else(|e| e.into_inner());
            let report = match pending.take() {
                Some(p) if p.token == req.token => p.report,
                other => {
                    *pending = other;
                    return Err(ApiError(StatusCode::CONFLICT, format!("token {} is stale or unknown", req.token)));
                }
            };
            let version = s.commit(report)?;
            Ok(json!({ "version": version, "parent_id": id }))
        })
        .await?,
    ))
}

async fn checkout(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<serde_json::Value> {
    Ok(Json(
        blocking(&st, move |st| {
            let mut s = st.session_mut();
            s.checkout(&id)?;
            *st.pending.lock().unwrap_or_else(|e| e.into_inner()) = None;
            Ok(json!({ "head": id }))
        })
        .await?,
    ))
}

async fn list_videos(State(st): State<Shared>) -> ApiResult<Vec<VideoSummary>> {
    Ok(Json(st.videos.iter().map(VideoRecord::summary).collect()))
}

#[derive(Debug, Deserialize)]
struct TraceQuery {
    model: Option<String>,
}

async fn video_trace(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<TraceQuery>,
) -> ApiResult<PredictionTrace> {
    let t = blocking(&st, move |st| st.trace(&id, q.model.as_deref())).await?;
    Ok(Json((*t).clone()))
}

#[derive(Debug, Deserialize)]
struct AggregateQuery {
    start: usize,
    end: usize,
    model: Option<String>,
    n: Option<usize>,
}

#[derive(Debug, Serialize)]
struct AggregateResponse {
    model_version: String,
    #[serde(flatten)]
    aggregate: Aggregate,
    top_pristine: Vec<Contributor>,
    top_manipulated: Vec<Contributor>,
}

async fn video_aggregate(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<AggregateQuery>,
) -> ApiResult<AggregateResponse> {
    Ok(Json(
        blocking(&st, move |st| {
            let t = st.trace(&id, q.model.as_deref())?;
            let n = q.n.unwrap_or(5);
            Ok(AggregateResponse {
                model_version: t.model_version.clone(),
                aggregate: aggregate(&t, q.start, q.end)?,
                top_pristine: top_contributors(&t, q.start, q.end, Label::Pristine, n)?,
                top_manipulated: top_contributors(&t, q.start, q.end, Label::Manipulated, n)?,
            })
        })
        .await?,
    ))
}
