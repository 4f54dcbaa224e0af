//! HTTP service: REST endpoints over sessions stored under one root
//! directory, plus a server-sent event stream of stage progress.

use std::collections::HashMap;
use std::convert::Infallible;
use std::io::{Cursor, Write};
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::broadcast;

use scribbletex_backends::BackendSet;
use scribbletex_core::render::RenderMode;
use scribbletex_core::scribble::Stroke;

use crate::cli::open_backends;
use crate::config::PipelineConfig;
use crate::engine::{Engine, Event, EventSink, RunOptions};
use crate::error::PipelineError;
use crate::session::{Session, CURRENT_ATLAS, SOURCE_MESH};

const MAX_UPLOAD: usize = 512 * 1024 * 1024;

/// Per-session resources kept across requests.
struct Handle {
    /// Serializes pipeline work on one session.
    work: Mutex<()>,
    backends: BackendSet,
    events: broadcast::Sender<Event>,
}

pub struct AppState {
    root: PathBuf,
    config: PipelineConfig,
    handles: Mutex<HashMap<String, Arc<Handle>>>,
    counter: AtomicU64,
}

impl AppState {
    pub fn new(root: impl Into<PathBuf>, config: PipelineConfig) -> Self {
        Self { root: root.into(), config, handles: Mutex::new(HashMap::new()), counter: AtomicU64::new(0) }
    }

    fn session_dir(&self, id: &str) -> Result<PathBuf, PipelineError> {
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(PipelineError::NotFound(format!("session {id}")));
        }
        Ok(self.root.join(id))
    }

    fn open(&self, id: &str) -> Result<Session, PipelineError> {
        Session::open(self.session_dir(id)?)
    }

    fn handle(&self, session: &Session) -> Result<Arc<Handle>, PipelineError> {
        let mut map = self.handles.lock().expect("handle map");
        if let Some(h) = map.get(&session.meta.id) {
            return Ok(h.clone());
        }
        let h = Arc::new(Handle { work: Mutex::new(()), backends: open_backends(session)?, events: broadcast::channel(256).0 });
        map.insert(session.meta.id.clone(), h.clone());
        Ok(h)
    }
}

pub struct ApiError(PipelineError);

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            PipelineError::Validation(_) => StatusCode::BAD_REQUEST,
            PipelineError::NotFound(_) => StatusCode::NOT_FOUND,
            PipelineError::OverlappingRegions { .. } => StatusCode::CONFLICT,
            PipelineError::Backend { .. } => StatusCode::BAD_GATEWAY,
            PipelineError::Stage { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            PipelineError::Io { .. } | PipelineError::Stopped(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(self.0.record())).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn bad(msg: impl Into<String>) -> ApiError {
    ApiError(PipelineError::Validation(msg.into()))
}

/// Run blocking pipeline work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, PipelineError> + Send + 'static) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError),
        Err(e) => Err(ApiError(PipelineError::Stage { stage: crate::session::Stage::Setup, message: format!("worker panicked: {e}") })),
    }
}

fn file_url(session: &str, rel: &str) -> String {
    format!("/sessions/{session}/files/{rel}")
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/views/{view}/{kind}", get(get_view))
        .route("/sessions/{id}/regions", post(add_regions))
        .route("/sessions/{id}/regions/{r}/refine", post(refine))
        .route("/sessions/{id}/regions/{r}/intents", get(intents))
        .route("/sessions/{id}/regions/{r}/run", post(run_region))
        .route("/sessions/{id}/run-multi", post(run_multi))
        .route("/sessions/{id}/export", get(export))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/files/{*path}", get(files))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(state)
}

async fn create_session(State(st): State<Arc<AppState>>, mut form: Multipart) -> ApiResult<Response> {
    let (mut mesh, mut atlas, mut config) = (None, None, None);
    while let Some(field) = form.next_field().await.map_err(|e| bad(format!("multipart: {e}")))? {
        let name = field.name().unwrap_or("").to_string();
        let data = field.bytes().await.map_err(|e| bad(format!("multipart: {e}")))?;
        match name.as_str() {
            "mesh" => mesh = Some(data),
            "atlas" => atlas = Some(data),
            "config" => config = Some(data),
            other => return Err(bad(format!("unexpected form field {other:?}"))),
        }
    }
    let mesh = mesh.ok_or_else(|| bad("missing \"mesh\" field"))?;
    let atlas = atlas.ok_or_else(|| bad("missing \"atlas\" field"))?;
    let cfg = match config {
        Some(c) => {
            let text = std::str::from_utf8(&c).map_err(|_| bad("config is not UTF-8"))?;
            PipelineConfig::from_toml(text)?
        }
        None => st.config.clone(),
    };
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    let id = format!("s{stamp:x}-{}", st.counter.fetch_add(1, Ordering::SeqCst));
    let dir = st.session_dir(&id)?;
    let session = blocking(move || Session::create_from_bytes(dir, &mesh, &atlas, cfg)).await?;
    let cfg = session.config();
    let body = json!({
        "id": session.meta.id,
        "intent_views": cfg.intent_views().iter().map(|v| v.id()).collect::<Vec<_>>(),
        "coverage_views": cfg.coverage_views().iter().map(|v| v.id()).collect::<Vec<_>>(),
    });
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn get_session(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let s = st.open(&id)?;
    let regions = s.regions()?;
    let atlas = if s.path(CURRENT_ATLAS).exists() { CURRENT_ATLAS } else { crate::session::SOURCE_ATLAS };
    Ok(Json(json!({
        "id": s.meta.id,
        "created_unix": s.meta.created_unix,
        "config": s.meta.config,
        "regions": regions,
        "atlas_url": file_url(&id, atlas),
    })))
}

async fn get_view(State(st): State<Arc<AppState>>, UrlPath((id, view, kind)): UrlPath<(String, String, String)>) -> ApiResult<Response> {
    let mode = match kind.as_str() {
        "color.png" => RenderMode::Textured,
        "geometry.png" => RenderMode::Geometry,
        _ => return Err(ApiError(PipelineError::NotFound(format!("view image {kind}")))),
    };
    let s = st.open(&id)?;
    let bytes = blocking(move || {
        let p = s.render_view(&view, mode)?;
        std::fs::read(&p).map_err(|e| PipelineError::io(&p, e))
    })
    .await?;
    Ok(png(bytes))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RegionsBody {
    Wrapped { strokes: Vec<Stroke>, #[serde(default)] hint: Option<String> },
    List(Vec<Stroke>),
}

async fn add_regions(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Response> {
    let body: RegionsBody = serde_json::from_slice(&body).map_err(|e| bad(format!("strokes: {e}")))?;
    let (strokes, hint) = match body {
        RegionsBody::Wrapped { strokes, hint } => (strokes, hint),
        RegionsBody::List(s) => (s, None),
    };
    let mut s = st.open(&id)?;
    let h = st.handle(&s)?;
    let regions = blocking(move || {
        let _g = h.work.lock().expect("session lock");
        s.add_regions(&strokes, hint.as_deref())
    })
    .await?;
    let urls: Vec<_> = regions.iter().map(|r| file_url(&id, &format!("regions/{}/overlay.png", r.id))).collect();
    Ok((StatusCode::CREATED, Json(json!({ "regions": regions, "overlay_urls": urls }))).into_response())
}

fn sink(h: &Arc<Handle>) -> EventSink {
    let tx = h.events.clone();
    Arc::new(move |e: &Event| {
        let _ = tx.send(e.clone());
    })
}

async fn refine(State(st): State<Arc<AppState>>, UrlPath((id, r)): UrlPath<(String, String)>) -> ApiResult<Json<Value>> {
    let s = st.open(&id)?;
    let h = st.handle(&s)?;
    let rr = r.clone();
    let texels = blocking(move || {
        let _g = h.work.lock().expect("session lock");
        let mut eng = Engine::new(&s, &h.backends)?.with_events(sink(&h));
        Ok(eng.refine_only(&rr)?.count())
    })
    .await?;
    Ok(Json(json!({ "region": r, "texels": texels, "mask_url": file_url(&id, &format!("regions/{r}/refine/region.png")) })))
}

async fn intents(State(st): State<Arc<AppState>>, UrlPath((id, r)): UrlPath<(String, String)>) -> ApiResult<Json<Value>> {
    let s = st.open(&id)?;
    let h = st.handle(&s)?;
    let rr = r.clone();
    let preds = blocking(move || {
        let _g = h.work.lock().expect("session lock");
        let mut eng = Engine::new(&s, &h.backends)?.with_events(sink(&h));
        eng.predict_only(&rr)
    })
    .await?;
    Ok(Json(json!({ "region": r, "predictions": preds })))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RunBody {
    intent_rank: Option<usize>,
}

fn parse_optional<T: serde::de::DeserializeOwned + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| bad(format!("body: {e}")))
}

fn report_json(id: &str, report: &crate::engine::RunReport) -> Value {
    let mut v = serde_json::to_value(report).expect("report serializes");
    v["atlas_url"] = json!(file_url(id, CURRENT_ATLAS));
    v
}

async fn run_region(State(st): State<Arc<AppState>>, UrlPath((id, r)): UrlPath<(String, String)>, body: Bytes) -> ApiResult<Json<Value>> {
    let body: RunBody = parse_optional(&body)?;
    let s = st.open(&id)?;
    let h = st.handle(&s)?;
    let report = blocking(move || {
        let _g = h.work.lock().expect("session lock");
        let mut eng = Engine::new(&s, &h.backends)?.with_events(sink(&h));
        eng.run_edit(&r, &RunOptions { intent_rank: body.intent_rank, stop_after: None })
    })
    .await?;
    Ok(Json(report_json(&id, &report)))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct MultiBody {
    region_ids: Vec<String>,
    intent_rank: Option<usize>,
}

async fn run_multi(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let body: MultiBody = serde_json::from_slice(&body).map_err(|e| bad(format!("body: {e}")))?;
    let s = st.open(&id)?;
    let h = st.handle(&s)?;
    let report = blocking(move || {
        let _g = h.work.lock().expect("session lock");
        let mut eng = Engine::new(&s, &h.backends)?.with_events(sink(&h));
        eng.run_multi(&body.region_ids, &RunOptions { intent_rank: body.intent_rank, stop_after: None })
    })
    .await?;
    Ok(Json(report_json(&id, &report)))
}

/// Zip with the source OBJ (given a material reference when it has none),
/// the current atlas and a material file.
pub fn export_zip(session: &Session) -> Result<Vec<u8>, PipelineError> {
    let obj_path = session.path(SOURCE_MESH);
    let obj = std::fs::read_to_string(&obj_path).map_err(|e| PipelineError::io(&obj_path, e))?;
    let obj = if obj.lines().any(|l| l.trim_start().starts_with("mtllib")) {
        obj
    } else {
        format!("mtllib material.mtl\nusemtl atlas\n{obj}")
    };
    let atlas = session.current_atlas()?.encode_png();
    let mtl = "newmtl atlas\nKd 1 1 1\nmap_Kd atlas.png\n";
    let mut zip = zip::ZipWriter::new(Cursor::new(Vec::new()));
    let opts = zip::write::SimpleFileOptions::default().compression_method(zip::CompressionMethod::Deflated);
    let zerr = |e: zip::result::ZipError| PipelineError::Stage { stage: crate::session::Stage::Setup, message: format!("export: {e}") };
    for (name, bytes) in [("mesh.obj", obj.as_bytes()), ("material.mtl", mtl.as_bytes()), ("atlas.png", &atlas[..])] {
        zip.start_file(name, opts).map_err(zerr)?;
        zip.write_all(bytes).map_err(|e| PipelineError::io(Path::new(name), e))?;
    }
    Ok(zip.finish().map_err(zerr)?.into_inner())
}

async fn export(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let s = st.open(&id)?;
    let bytes = blocking(move || export_zip(&s)).await?;
    let disposition = format!("attachment; filename=\"{id}.zip\"");
    Ok(([(header::CONTENT_TYPE, "application/zip".to_string()), (header::CONTENT_DISPOSITION, disposition)], bytes).into_response())
}

async fn events(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let s = st.open(&id)?;
    let rx = st.handle(&s)?.events.subscribe();
    let stream = futures::stream::unfold((rx, id), |(mut rx, id)| async move {
        loop {
            match rx.recv().await {
                Ok(ev) => {
                    let name = match ev.status.as_str() {
                        "started" => "stage-started",
                        "failed" => "stage-failed",
                        _ => "stage-finished",
                    };
                    let mut data = serde_json::to_value(&ev).expect("event serializes");
                    data["artifact_urls"] = json!(ev.artifacts.iter().map(|a| file_url(&id, a)).collect::<Vec<_>>());
                    let sse = SseEvent::default().event(name).data(data.to_string());
                    return Some((Ok::<_, Infallible>(sse), (rx, id)));
                }
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()).into_response())
}

async fn files(State(st): State<Arc<AppState>>, UrlPath((id, path)): UrlPath<(String, String)>) -> ApiResult<Response> {
    let rel = Path::new(&path);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(ApiError(PipelineError::NotFound(path)));
    }
    let full = st.session_dir(&id)?.join(rel);
    if !full.is_file() {
        return Err(ApiError(PipelineError::NotFound(path)));
    }
    let bytes = tokio::fs::read(&full).await.map_err(|e| ApiError(PipelineError::io(&full, e)))?;
    let ctype = match full.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("json") => "application/json",
        Some("jsonl") => "application/x-ndjson",
        Some("obj") | Some("mtl") | Some("txt") => "text/plain",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, ctype)], bytes).into_response())
}

/// Serve until interrupted.
pub fn serve(addr: SocketAddr, root: PathBuf, config: PipelineConfig) -> Result<(), PipelineError> {
    config.validate()?;
    std::fs::create_dir_all(&root).map_err(|e| PipelineError::io(&root, e))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| PipelineError::io(Path::new("tokio runtime"), e))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| PipelineError::io(Path::new(&addr.to_string()), e))?;
        eprintln!("listening on http://{addr}");
        let app = router(Arc::new(AppState::new(root, config)));
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| PipelineError::io(Path::new(&addr.to_string()), e))
    })
}
