//! REST backend for interactive segmentation.
//!
//! Scenes are loaded once and shared read-only; each session keeps its own
//! prompt history and current segmentation. See `openapi.yaml` next to this
//! crate for the wire schema.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::header;
use axum::response::IntoResponse;
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use gsseg_core::eval::{StageCounts, TimeBreakdown};
use gsseg_core::matching::Segmentation;
use gsseg_core::pipeline::{segment, Scene, PLY_FILE};
use gsseg_core::prompt::Prompt;
use gsseg_core::scene::write_ply;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

mod error;
pub mod render;

pub use error::ApiError;

type ApiResult<T> = Result<T, ApiError>;

pub struct Session {
    pub id: String,
    pub scene: String,
    /// Every prompt ever submitted, with the segmentation it produced.
    pub history: Vec<HistoryEntry>,
    /// Indices into `history` of the prompts not undone, oldest first.
    active: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct HistoryEntry {
    pub prompt: Prompt,
    pub segmentation_id: String,
}

impl Session {
    pub fn current(&self) -> Option<&HistoryEntry> {
        self.active.last().map(|&i| &self.history[i])
    }
}

struct StoredSegmentation {
    scene: String,
    segmentation: Arc<Segmentation>,
}

/// Shared server state. Cloning is cheap.
#[derive(Clone, Default)]
pub struct AppState {
    inner: Arc<Inner>,
}

#[derive(Default)]
struct Inner {
    scene_dir: Option<PathBuf>,
    scenes: RwLock<BTreeMap<String, Arc<Scene>>>,
    sessions: std::sync::Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    segmentations: RwLock<HashMap<String, StoredSegmentation>>,
    next_session: AtomicU64,
    next_segmentation: AtomicU64,
}

impl AppState {
    /// `scene_dir` anchors relative paths in `POST /scenes`.
    pub fn new(scene_dir: Option<PathBuf>) -> Self {
        AppState {
            inner: Arc::new(Inner {
                scene_dir,
                ..Default::default()
            }),
        }
    }

    /// Registers an already loaded scene; fails if the id is taken.
    pub fn insert_scene(&self, id: impl Into<String>, scene: Scene) -> ApiResult<()> {
        let id = id.into();
        let mut scenes = self.inner.scenes.write().unwrap();
        if scenes.contains_key(&id) {
            return Err(ApiError::conflict(format!("scene {} is already loaded", id)));
        }
        scenes.insert(id, Arc::new(scene));
        Ok(())
    }

    pub fn scene(&self, id: &str) -> ApiResult<Arc<Scene>> {
        self.inner
            .scenes
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown scene {}", id)))
    }

    pub fn scene_ids(&self) -> Vec<String> {
        self.inner.scenes.read().unwrap().keys().cloned().collect()
    }

    fn resolve_path(&self, p: &str) -> PathBuf {
        let path = PathBuf::from(p);
        match &self.inner.scene_dir {
            Some(base) if path.is_relative() => base.join(path),
            _ => path,
        }
    }

    /// Loads every immediate subdirectory of `dir` holding a scene bundle.
    pub fn load_all(&self, dir: &Path) -> gsseg_core::Result<Vec<String>> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| gsseg_core::Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(PLY_FILE).is_file())
            .collect();
        entries.sort();
        let mut ids = Vec::new();
        for path in entries {
            let scene = Scene::load(&path)?;
            let id = scene.name.clone();
            if self.insert_scene(id.clone(), scene).is_ok() {
                log::info!("loaded scene {} from {}", id, path.display());
                ids.push(id);
            }
        }
        Ok(ids)
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        self.inner
            .sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {}", id)))
    }

    fn new_session(&self, scene: &str) -> (String, Arc<Mutex<Session>>) {
        let n = self.inner.next_session.fetch_add(1, Ordering::Relaxed) + 1;
        let id = format!("session-{}", n);
        let session = Arc::new(Mutex::new(Session {
            id: id.clone(),
            scene: scene.to_string(),
            history: Vec::new(),
            active: Vec::new(),
        }));
        self.inner.sessions.lock().unwrap().insert(id.clone(), session.clone());
        (id, session)
    }

    fn segmentation(&self, scene: &str, id: &str) -> ApiResult<Arc<Segmentation>> {
        let store = self.inner.segmentations.read().unwrap();
        match store.get(id) {
            Some(s) if s.scene == scene => Ok(s.segmentation.clone()),
            _ => Err(ApiError::not_found(format!("unknown segmentation {} in scene {}", id, scene))),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/scenes", get(list_scenes).post(load_scenes))
        .route("/scenes/{id}", get(scene_info))
        .route("/scenes/{id}/render", get(render_view))
        .route("/scenes/{id}/segment", post(segment_prompt))
        .route("/scenes/{id}/segmentations/{sid}", get(get_segmentation))
        .route("/scenes/{id}/segmentations/{sid}/export", get(export_segmentation))
        .route("/scenes/{id}/sessions/{session}", get(session_info))
        .route("/scenes/{id}/sessions/{session}/last", delete(undo))
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {}", e)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SceneSummary {
    pub id: String,
    pub num_gaussians: usize,
    pub trained: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ViewInfo {
    pub id: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SceneInfo {
    pub id: String,
    pub num_gaussians: usize,
    pub trained: bool,
    pub views: Vec<ViewInfo>,
    pub held_out_views: Vec<ViewInfo>,
}

fn summary(id: &str, scene: &Scene) -> SceneSummary {
    SceneSummary {
        id: id.to_string(),
        num_gaussians: scene.cloud.len(),
        trained: scene.is_trained(),
    }
}

async fn list_scenes(State(state): State<AppState>) -> Json<Vec<SceneSummary>> {
    let scenes = state.inner.scenes.read().unwrap();
    Json(scenes.iter().map(|(id, s)| summary(id, s)).collect())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoadRequest {
    paths: Vec<String>,
}

async fn load_scenes(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<Vec<SceneSummary>>> {
    let req: LoadRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("body: {}", e)))?;
    if req.paths.is_empty() {
        return Err(ApiError::bad_request("paths: at least one scene path is required"));
    }
    let mut out = Vec::new();
    for p in req.paths {
        let path = state.resolve_path(&p);
        if !path.join(PLY_FILE).is_file() {
            return Err(ApiError::not_found(format!("no scene bundle at {}", path.display())));
        }
        let scene = blocking(move || Scene::load(path)).await??;
        let id = scene.name.clone();
        let s = summary(&id, &scene);
        state.insert_scene(id, scene)?;
        out.push(s);
    }
    Ok(Json(out))
}

fn views(cams: &[gsseg_core::scene::Camera]) -> Vec<ViewInfo> {
    cams.iter()
        .map(|c| ViewInfo {
            id: c.id.clone(),
            width: c.width,
            height: c.height,
        })
        .collect()
}

async fn scene_info(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SceneInfo>> {
    let scene = state.scene(&id)?;
    Ok(Json(SceneInfo {
        id,
        num_gaussians: scene.cloud.len(),
        trained: scene.is_trained(),
        views: views(&scene.cameras),
        held_out_views: views(&scene.held_out),
    }))
}

#[derive(Debug, Deserialize)]
struct RenderQuery {
    view: String,
    /// Segmentation id to highlight.
    overlay: Option<String>,
    /// Render a scene whose features are not trained yet.
    #[serde(default)]
    untrained: bool,
}

async fn render_view(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<RenderQuery>,
) -> ApiResult<impl IntoResponse> {
    let scene = state.scene(&id)?;
    if !scene.is_trained() && !q.untrained {
        return Err(ApiError::conflict(format!(
            "scene {} has no trained features; pass untrained=true to render anyway",
            id
        )));
    }
    let cam = scene
        .camera(&q.view)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown view {}", q.view)))?;
    let overlay = q.overlay.as_deref().map(|sid| state.segmentation(&id, sid)).transpose()?;
    let png = blocking(move || -> ApiResult<Vec<u8>> {
        let trace = scene.trace(&cam.id)?;
        let colors: Vec<f64> = scene.cloud.colors.iter().flatten().copied().collect();
        let mut rgb = trace.render(&colors, 3);
        if let Some(seg) = overlay {
            render::apply_overlay(&mut rgb, &trace, &seg.membership);
        }
        render::encode_png(&rgb, cam.width, cam.height)
    })
    .await??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png))
}

#[derive(Debug, Deserialize)]
struct SegmentQuery {
    session: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub session: String,
    pub segmentation_id: String,
    pub counts: StageCounts,
    pub timing: TimeBreakdown,
    /// Guidance prompts: fraction of the reference mask covered by the
    /// pooled query's response, and whether that query was kept.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accepted: Option<bool>,
}

async fn segment_prompt(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<SegmentQuery>,
    body: Bytes,
) -> ApiResult<Json<SegmentResponse>> {
    let scene = state.scene(&id)?;
    if !scene.is_trained() {
        return Err(ApiError::conflict(format!("scene {} has no trained features", id)));
    }
    let text = std::str::from_utf8(&body).map_err(|_| ApiError::bad_request("body: not UTF-8"))?;
    let prompt = Prompt::from_json(text)?;
    let (session_id, session) = match q.session {
        Some(sid) => {
            let s = state.session(&sid)?;
            if s.lock().await.scene != id {
                return Err(ApiError::conflict(format!("session {} belongs to another scene", sid)));
            }
            (sid, s)
        }
        None => state.new_session(&id),
    };
    let mut session = session.lock().await;
    let p = prompt.clone();
    let outcome = blocking(move || segment(&scene, &p)).await??;

    let n = state.inner.next_segmentation.fetch_add(1, Ordering::Relaxed) + 1;
    let segmentation_id = format!("seg-{}", n);
    let counts = StageCounts {
        raw: outcome.raw.count(),
        filtered: outcome.filtered.count(),
        grown: outcome.grown.count(),
    };
    state.inner.segmentations.write().unwrap().insert(
        segmentation_id.clone(),
        StoredSegmentation {
            scene: id,
            segmentation: Arc::new(outcome.grown),
        },
    );
    session.history.push(HistoryEntry {
        prompt,
        segmentation_id: segmentation_id.clone(),
    });
    let last = session.history.len() - 1;
    session.active.push(last);
    Ok(Json(SegmentResponse {
        session: session_id,
        segmentation_id,
        counts,
        timing: outcome.timing,
        overlap: outcome.sam_decision.map(|d| d.0),
        accepted: outcome.sam_decision.map(|d| d.1),
    }))
}

async fn get_segmentation(
    State(state): State<AppState>,
    UrlPath((id, sid)): UrlPath<(String, String)>,
) -> ApiResult<impl IntoResponse> {
    let seg = state.segmentation(&id, &sid)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], seg.to_json()?))
}

async fn export_segmentation(
    State(state): State<AppState>,
    UrlPath((id, sid)): UrlPath<(String, String)>,
) -> ApiResult<impl IntoResponse> {
    let scene = state.scene(&id)?;
    let seg = state.segmentation(&id, &sid)?;
    if seg.count() == 0 {
        return Err(ApiError::conflict(format!("segmentation {} is empty", sid)));
    }
    let bytes = blocking(move || -> ApiResult<Vec<u8>> {
        let subset = scene.cloud.subset(&seg.membership)?;
        let mut out = Vec::new();
        write_ply(&subset, &mut out).map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(out)
    })
    .await??;
    let disposition = format!("attachment; filename=\"{}.ply\"", sid);
    Ok((
        [
            (header::CONTENT_TYPE, "application/octet-stream".to_string()),
            (header::CONTENT_DISPOSITION, disposition),
        ],
        bytes,
    ))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session: String,
    pub scene: String,
    pub segmentation_id: Option<String>,
    pub history_len: usize,
    pub active_len: usize,
}

fn session_summary(s: &Session) -> SessionInfo {
    SessionInfo {
        session: s.id.clone(),
        scene: s.scene.clone(),
        segmentation_id: s.current().map(|e| e.segmentation_id.clone()),
        history_len: s.history.len(),
        active_len: s.active.len(),
    }
}

async fn checked_session(state: &AppState, scene: &str, sid: &str) -> ApiResult<Arc<Mutex<Session>>> {
    state.scene(scene)?;
    let s = state.session(sid)?;
    if s.lock().await.scene != scene {
        return Err(ApiError::not_found(format!("unknown session {} in scene {}", sid, scene)));
    }
    Ok(s)
}

async fn session_info(
    State(state): State<AppState>,
    UrlPath((id, sid)): UrlPath<(String, String)>,
) -> ApiResult<Json<SessionInfo>> {
    let s = checked_session(&state, &id, &sid).await?;
    let s = s.lock().await;
    Ok(Json(session_summary(&s)))
}

/// Drops the latest prompt; the previous segmentation becomes current.
async fn undo(
    State(state): State<AppState>,
    UrlPath((id, sid)): UrlPath<(String, String)>,
) -> ApiResult<Json<SessionInfo>> {
    let s = checked_session(&state, &id, &sid).await?;
    let mut s = s.lock().await;
    if s.active.pop().is_none() {
        return Err(ApiError::conflict(format!("session {} has nothing to undo", sid)));
    }
    Ok(Json(session_summary(&s)))
}
