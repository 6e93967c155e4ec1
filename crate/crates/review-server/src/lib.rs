//! HTTP service behind the review UI.
//!
//! Reads are served from shared derived state. Every mutation (verdicts and
//! cluster allowlisting) goes through one writer thread that owns the
//! verdict log, so appends are serialized and acknowledged only once durable.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use camtrap_core::canonical;
use camtrap_core::coco_ct::Dataset;
use camtrap_core::crops::{ClassifierManifest, CropOptions};
use camtrap_core::detection::{DetectionsFile, ImageDetections};
use camtrap_core::rde::{parse_allowlist, render_allowlist, SuspiciousCluster};
use camtrap_core::review::{
    build_dataset_queue, export_verified, ConfidenceBands, Decision, QueueOrder, ReviewContext, ReviewError,
    ReviewItem, ReviewState, ReviewStatus, Verdict, VerdictRequest, VerdictStore,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};
use tower_http::services::ServeDir;

pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 1000;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything the service needs to start.
pub struct ServerConfig {
    pub dataset: Dataset,
    pub results: DetectionsFile,
    pub clusters: Vec<SuspiciousCluster>,
    pub verdict_log: PathBuf,
    pub allowlist: PathBuf,
    pub media_root: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
    pub bands: ConfidenceBands,
    pub crop: CropOptions,
}

struct Shared {
    dataset: Dataset,
    results: DetectionsFile,
    clusters: Vec<SuspiciousCluster>,
    crop: CropOptions,
    media_root: Option<PathBuf>,
    desc: Vec<ReviewItem>,
    asc: Vec<ReviewItem>,
    file_by_id: BTreeMap<String, String>,
    known_files: BTreeSet<String>,
    state: Arc<RwLock<ReviewState>>,
    allowlisted: Arc<RwLock<BTreeSet<String>>>,
    writer: mpsc::Sender<WriteCmd>,
}

enum WriteCmd {
    Verdict(VerdictRequest, oneshot::Sender<Result<Verdict, ReviewError>>),
    Allowlist(String, oneshot::Sender<std::io::Result<()>>),
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

/// Replay the verdict log, start the writer thread and build the router.
pub fn build_app(cfg: ServerConfig) -> Result<Router, ServerError> {
    let store = VerdictStore::open(&cfg.verdict_log)?;
    let allowlisted = match std::fs::read_to_string(&cfg.allowlist) {
        Ok(text) => parse_allowlist(&text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeSet::new(),
        Err(e) => return Err(e.into()),
    };
    log::info!(
        "replayed {} verdicts from {}",
        store.log().len(),
        cfg.verdict_log.display()
    );

    let (tx, rx) = mpsc::channel(256);
    let index = cfg.dataset.index();
    let file_by_id = cfg
        .results
        .images()
        .iter()
        .filter_map(|img| index.image_by_file(img.file()).map(|r| (r.id.clone(), img.file().to_string())))
        .collect();
    let known_files = cfg.dataset.images.iter().map(|i| i.file_name.clone()).collect();
    let shared = Arc::new(Shared {
        desc: build_dataset_queue(&cfg.results, &cfg.dataset, &cfg.bands, QueueOrder::Desc),
        asc: build_dataset_queue(&cfg.results, &cfg.dataset, &cfg.bands, QueueOrder::Asc),
        state: Arc::new(RwLock::new(store.state().clone())),
        allowlisted: Arc::new(RwLock::new(allowlisted)),
        dataset: cfg.dataset,
        results: cfg.results,
        clusters: cfg.clusters,
        crop: cfg.crop,
        media_root: cfg.media_root,
        file_by_id,
        known_files,
        writer: tx,
    });

    let ctx = ReviewContext::new(&shared.results, &shared.dataset);
    let writer = Writer {
        store,
        ctx,
        state: Arc::clone(&shared.state),
        allowlisted: Arc::clone(&shared.allowlisted),
        allowlist_path: cfg.allowlist,
    };
    std::thread::Builder::new()
        .name("verdict-writer".into())
        .spawn(move || writer.run(rx))?;

    let mut router = Router::new()
        .route("/api/queue", get(queue))
        .route("/api/images/{*image_id}", get(image))
        .route("/api/verdicts", post(record_verdict))
        .route("/api/categories", get(categories))
        .route("/api/clusters", get(clusters))
        .route("/api/clusters/{cluster_id}/allowlist", post(allowlist))
        .route("/api/export/manifest", get(export_manifest))
        .route("/media/{*file}", get(media))
        .with_state(AppState(shared));
    if let Some(dir) = cfg.static_dir {
        router = router.fallback_service(ServeDir::new(dir));
    }
    Ok(router)
}

/// Bind and serve until Ctrl-C.
pub async fn serve(cfg: ServerConfig, addr: SocketAddr) -> Result<(), ServerError> {
    let app = build_app(cfg)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Sole owner of the verdict log. Exits when the router is dropped.
struct Writer {
    store: VerdictStore,
    ctx: ReviewContext,
    state: Arc<RwLock<ReviewState>>,
    allowlisted: Arc<RwLock<BTreeSet<String>>>,
    allowlist_path: PathBuf,
}

impl Writer {
    fn run(mut self, mut rx: mpsc::Receiver<WriteCmd>) {
        while let Some(cmd) = rx.blocking_recv() {
            match cmd {
                WriteCmd::Verdict(req, reply) => {
                    let result = self.store.record(&self.ctx, req);
                    if let Ok(v) = &result {
                        self.state.write().expect("state lock").apply(v);
                    }
                    let _ = reply.send(result);
                }
                WriteCmd::Allowlist(id, reply) => {
                    let mut next = self.allowlisted.read().expect("allowlist lock").clone();
                    next.insert(id);
                    let result = canonical::write_atomic(&self.allowlist_path, render_allowlist(&next).as_bytes());
                    if result.is_ok() {
                        *self.allowlisted.write().expect("allowlist lock") = next;
                    }
                    let _ = reply.send(result);
                }
            }
        }
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let status = match e {
            ReviewError::UnknownImage(_) => StatusCode::NOT_FOUND,
            ReviewError::BadDetectionIndex { .. } | ReviewError::UnknownSpecies(_) | ReviewError::BadBands => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            ReviewError::CorruptLog { .. } | ReviewError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

fn writer_gone() -> ApiError {
    ApiError(StatusCode::SERVICE_UNAVAILABLE, "verdict writer stopped".into())
}

#[derive(Debug, Deserialize)]
pub struct QueueParams {
    pub band_lo: Option<f64>,
    pub band_hi: Option<f64>,
    pub order: Option<QueueOrder>,
    pub offset: Option<usize>,
    pub limit: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueuePage {
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub items: Vec<ReviewItem>,
}

/// Confidence window `[lo, hi)`, closed at the top when `hi` is 1.
fn in_window(conf: f64, lo: f64, hi: f64) -> bool {
    conf >= lo && (conf < hi || (hi >= 1.0 && conf <= 1.0))
}

async fn queue(State(app): State<AppState>, Query(p): Query<QueueParams>) -> Result<Json<QueuePage>, ApiError> {
    let lo = p.band_lo.unwrap_or(0.0);
    let hi = p.band_hi.unwrap_or(1.0);
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(ApiError(StatusCode::BAD_REQUEST, format!("invalid band [{lo}, {hi}]")));
    }
    let limit = p.limit.unwrap_or(DEFAULT_PAGE).min(MAX_PAGE);
    let offset = p.offset.unwrap_or(0);
    let source = match p.order.unwrap_or_default() {
        QueueOrder::Desc => &app.0.desc,
        QueueOrder::Asc => &app.0.asc,
    };
    let matching = source.iter().filter(|i| in_window(i.max_detection_conf, lo, hi));
    let total = matching.clone().count();
    let mut items: Vec<ReviewItem> = matching.skip(offset).take(limit).cloned().collect();
    app.0.state.read().expect("state lock").mark(&mut items);
    Ok(Json(QueuePage {
        total,
        offset,
        limit,
        items,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImageView {
    pub image_id: String,
    pub location: String,
    pub width: u32,
    pub height: u32,
    pub species: Vec<String>,
    pub detections: ImageDetections,
    pub status: ReviewStatus,
    /// Effective decision per detection, after the last-wins fold.
    pub decisions: Vec<Option<Decision>>,
    pub verdicts: Vec<Verdict>,
}

async fn image(State(app): State<AppState>, UrlPath(image_id): UrlPath<String>) -> Result<Json<ImageView>, ApiError> {
    let s = &app.0;
    let not_found = || ApiError(StatusCode::NOT_FOUND, format!("unknown image {image_id:?}"));
    let file = s.file_by_id.get(&image_id).ok_or_else(not_found)?;
    let detections = s.results.get(file).ok_or_else(not_found)?.clone();
    let index = s.dataset.index();
    let record = index.image(&image_id).ok_or_else(not_found)?;
    let state = s.state.read().expect("state lock");
    Ok(Json(ImageView {
        image_id: image_id.clone(),
        location: record.location.clone(),
        width: record.width,
        height: record.height,
        species: index.species(&image_id).into_iter().map(str::to_string).collect(),
        decisions: (0..detections.detections().len())
            .map(|i| state.decision_for(&image_id, i).cloned())
            .collect(),
        status: state.status(&image_id),
        verdicts: state.image_verdicts(&image_id).into_iter().cloned().collect(),
        detections,
    }))
}

async fn record_verdict(
    State(app): State<AppState>,
    Json(req): Json<VerdictRequest>,
) -> Result<(StatusCode, Json<Verdict>), ApiError> {
    let (tx, rx) = oneshot::channel();
    app.0.writer.send(WriteCmd::Verdict(req, tx)).await.map_err(|_| writer_gone())?;
    let verdict = rx.await.map_err(|_| writer_gone())??;
    Ok((StatusCode::CREATED, Json(verdict)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CategoryView {
    pub id: u32,
    pub name: String,
}

async fn categories(State(app): State<AppState>) -> Json<Vec<CategoryView>> {
    Json(
        app.0
            .dataset
            .categories
            .iter()
            .map(|c| CategoryView {
                id: c.id,
                name: c.name.clone(),
            })
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterStatus {
    Pending,
    Allowlisted,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClusterView {
    #[serde(flatten)]
    pub cluster: SuspiciousCluster,
    pub status: ClusterStatus,
}

async fn clusters(State(app): State<AppState>) -> Json<Vec<ClusterView>> {
    let allow = app.0.allowlisted.read().expect("allowlist lock");
    Json(
        app.0
            .clusters
            .iter()
            .map(|c| ClusterView {
                status: if allow.contains(&c.cluster_id) {
                    ClusterStatus::Allowlisted
                } else {
                    ClusterStatus::Pending
                },
                cluster: c.clone(),
            })
            .collect(),
    )
}

async fn allowlist(
    State(app): State<AppState>,
    UrlPath(cluster_id): UrlPath<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    if !app.0.clusters.iter().any(|c| c.cluster_id == cluster_id) {
        return Err(ApiError(StatusCode::NOT_FOUND, format!("unknown cluster {cluster_id:?}")));
    }
    let (tx, rx) = oneshot::channel();
    app.0
        .writer
        .send(WriteCmd::Allowlist(cluster_id.clone(), tx))
        .await
        .map_err(|_| writer_gone())?;
    rx.await
        .map_err(|_| writer_gone())?
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(serde_json::json!({ "cluster_id": cluster_id, "status": ClusterStatus::Allowlisted })))
}

async fn export_manifest(State(app): State<AppState>) -> Json<ClassifierManifest> {
    let state = app.0.state.read().expect("state lock").clone();
    Json(export_verified(&state, &app.0.results, &app.0.dataset, &app.0.crop))
}

/// Only plain relative paths that name a dataset image are served.
fn safe_relative(file: &str) -> Option<&Path> {
    let p = Path::new(file);
    p.components()
        .all(|c| matches!(c, Component::Normal(_)))
        .then_some(p)
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("tif" | "tiff") => "image/tiff",
        _ => "application/octet-stream",
    }
}

async fn media(State(app): State<AppState>, UrlPath(file): UrlPath<String>) -> Result<Response, ApiError> {
    let not_found = || ApiError(StatusCode::NOT_FOUND, format!("no media {file:?}"));
    let root = app.0.media_root.as_ref().ok_or_else(not_found)?;
    let rel = safe_relative(&file).ok_or_else(|| ApiError(StatusCode::BAD_REQUEST, "invalid media path".into()))?;
    if !app.0.known_files.contains(&file) {
        return Err(not_found());
    }
    let path = root.join(rel);
    let bytes = tokio::fs::read(&path).await.map_err(|_| not_found())?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}
