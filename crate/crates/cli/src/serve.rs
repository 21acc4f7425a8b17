//! HTTP refocus service.
//!
//! `GET /meta`, `GET /render?view&f&q&map`, `GET /depth_at?view&x&y`, and the
//! viewer bundle as static files.

use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use dofsplat::camera_init::{percentile, view_depths};
use dofsplat::io::images::encode_png;
use dofsplat::io::Checkpoint;
use dofsplat::raster::{render_all_in_focus, RasterConfig};
use dofsplat::Image;
use lru::LruCache;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::{display, render_view, CliError, MapKind};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ViewMeta {
    pub index: usize,
    pub f: f64,
    pub q: f64,
    pub width: usize,
    pub height: usize,
    /// 5th, 50th and 95th percentile of point depths seen from this view.
    pub depth_percentiles: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Meta {
    pub views: Vec<ViewMeta>,
    /// Over all views, same percentiles as per view.
    pub depth_percentiles: [f64; 3],
    /// `[width, height]` of the first view.
    pub image_size: [usize; 2],
}

pub fn build_meta(ck: &Checkpoint) -> Meta {
    let pct = |d: &[f64]| [5.0, 50.0, 95.0].map(|p| percentile(d, p).unwrap_or(0.0));
    let mut all = Vec::new();
    let views = ck
        .views
        .iter()
        .enumerate()
        .map(|(index, v)| {
            let d = view_depths(&ck.scene, &v.camera);
            let depth_percentiles = pct(&d);
            all.extend(d);
            ViewMeta {
                index,
                f: v.lens.focal_distance,
                q: v.lens.aperture,
                width: v.camera.width,
                height: v.camera.height,
                depth_percentiles,
            }
        })
        .collect();
    let image_size = ck.views.first().map(|v| [v.camera.width, v.camera.height]).unwrap_or([0, 0]);
    Meta { views, depth_percentiles: pct(&all), image_size }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct CacheKey {
    view: usize,
    f: u64,
    q: u64,
    map: MapKind,
}

#[derive(Debug, Clone)]
struct Rendered {
    png: Arc<Vec<u8>>,
    min: f64,
    max: f64,
    f: f64,
    q: f64,
}

/// Shared, read-only service state plus the render cache.
pub struct AppState {
    checkpoint: Checkpoint,
    raster: RasterConfig,
    meta: Meta,
    pool: rayon::ThreadPool,
    cache: Mutex<LruCache<CacheKey, Rendered>>,
    depth: Mutex<Vec<Option<Arc<Image>>>>,
}

impl AppState {
    pub fn new(checkpoint: Checkpoint, raster: RasterConfig, workers: usize, cache_entries: usize) -> Result<Self, CliError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .thread_name(|i| format!("render-{i}"))
            .build()
            .map_err(|e| CliError::Usage(format!("worker pool: {e}")))?;
        let views = checkpoint.views.len();
        Ok(Self {
            meta: build_meta(&checkpoint),
            checkpoint,
            raster,
            pool,
            cache: Mutex::new(LruCache::new(NonZeroUsize::new(cache_entries.max(1)).expect("non-zero"))),
            depth: Mutex::new(vec![None; views]),
        })
    }

    pub fn meta(&self) -> &Meta {
        &self.meta
    }

    fn render(&self, view: usize, f: Option<f64>, q: Option<f64>, map: MapKind) -> Result<Rendered, ApiError> {
        let lens = crate::view_lens(&self.checkpoint, view, f, q).map_err(|e| ApiError::bad(e.to_string()))?;
        let key = CacheKey { view, f: lens.focal_distance.to_bits(), q: lens.aperture.to_bits(), map };
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let out = self.pool.install(|| render_view(&self.checkpoint, view, &lens, &self.raster));
        let d = display(&out, map);
        let png = encode_png(&d.image).map_err(|e| ApiError::internal(e.to_string()))?;
        let r = Rendered { png: Arc::new(png), min: d.min, max: d.max, f: lens.focal_distance, q: lens.aperture };
        self.cache.lock().expect("cache lock").put(key, r.clone());
        Ok(r)
    }

    /// Alpha-normalized all-in-focus depth of `view`, computed once.
    fn depth_map(&self, view: usize) -> Arc<Image> {
        if let Some(d) = &self.depth.lock().expect("depth lock")[view] {
            return d.clone();
        }
        let cam = &self.checkpoint.views[view].camera;
        let d = Arc::new(self.pool.install(|| render_all_in_focus(&self.checkpoint.scene, cam, &self.raster).normalized_depth()));
        self.depth.lock().expect("depth lock")[view] = Some(d.clone());
        d
    }

    fn check_view(&self, view: usize) -> Result<(), ApiError> {
        if view >= self.checkpoint.views.len() {
            return Err(ApiError { status: StatusCode::NOT_FOUND, message: format!("unknown view {view}") });
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad(message: String) -> Self {
        Self { status: StatusCode::BAD_REQUEST, message }
    }

    fn internal(message: String) -> Self {
        Self { status: StatusCode::INTERNAL_SERVER_ERROR, message }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct RenderQuery {
    pub view: usize,
    pub f: Option<f64>,
    pub q: Option<f64>,
    pub map: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct DepthQuery {
    pub view: usize,
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct DepthAt {
    pub depth: f64,
}

async fn meta(State(state): State<Arc<AppState>>) -> Json<Meta> {
    Json(state.meta.clone())
}

fn header_f64(v: f64) -> HeaderValue {
    HeaderValue::from_str(&v.to_string()).expect("numeric header")
}

async fn render_handler(
    State(state): State<Arc<AppState>>,
    query: Result<Query<RenderQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::bad(e.body_text()))?;
    state.check_view(q.view)?;
    let map = match q.map.as_deref() {
        None => MapKind::Color,
        Some(s) => MapKind::parse(s).ok_or_else(|| ApiError::bad(format!("unknown map {s:?}")))?,
    };
    let st = state.clone();
    let r = tokio::task::spawn_blocking(move || st.render(q.view, q.f, q.q, map))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    let mut resp = (StatusCode::OK, r.png.as_ref().clone()).into_response();
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    h.insert("x-focal-distance", header_f64(r.f));
    h.insert("x-aperture", header_f64(r.q));
    if map != MapKind::Color {
        h.insert("x-map-min", header_f64(r.min));
        h.insert("x-map-max", header_f64(r.max));
    }
    Ok(resp)
}

async fn depth_at(
    State(state): State<Arc<AppState>>,
    query: Result<Query<DepthQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<DepthAt>, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::bad(e.body_text()))?;
    state.check_view(q.view)?;
    let cam = &state.checkpoint.views[q.view].camera;
    if q.x >= cam.width || q.y >= cam.height {
        return Err(ApiError::bad(format!("pixel ({}, {}) outside {}x{}", q.x, q.y, cam.width, cam.height)));
    }
    let st = state.clone();
    let d = tokio::task::spawn_blocking(move || st.depth_map(q.view)).await.map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(DepthAt { depth: d.at(q.x, q.y, 0) }))
}

/// Routes; `static_dir` is served for every other path.
pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let app = Router::new()
        .route("/meta", get(meta))
        .route("/render", get(render_handler))
        .route("/depth_at", get(depth_at))
        .with_state(state);
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

/// Binds `addr` and serves until the process ends.
pub async fn run(state: Arc<AppState>, static_dir: Option<PathBuf>, addr: &str) -> Result<(), CliError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| CliError::Runtime(dofsplat::Error::Io(e)))?;
    log::info!("serving on http://{}", listener.local_addr().map_err(|e| CliError::Runtime(dofsplat::Error::Io(e)))?);
    axum::serve(listener, router(state, static_dir))
        .await
        .map_err(|e| CliError::Runtime(dofsplat::Error::Io(e)))
}
