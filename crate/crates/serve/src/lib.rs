//! HTTP service holding interactive segmentation sessions.
//!
//! Each session owns an uploaded volume and an ordered click list. The
//! mask is always recomputed from the full click list, so undo followed
//! by the same click reproduces the same bytes.

pub mod session;

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::Engine;
use promptseg3d::infer::{InferConfig, PatchPredictor};
use promptseg3d::{nifti, BinaryMask, ClickLabel, Dims, PointPrompt, Spacing};
use serde::{Deserialize, Serialize};

pub use session::{
    render_slice, Axis, MaskSummary, RenderedSlice, ServeError, ServeResult, Session, SessionData, SessionStore,
    SliceFrame, Status,
};

pub const DEFAULT_MAX_SESSIONS: usize = 16;
pub const DEFAULT_MAX_VOLUME_MB: usize = 256;
pub const DEFAULT_PORT: u16 = 8080;

/// Seconds a client should wait before retrying a busy session.
const RETRY_AFTER_SECS: &str = "1";

#[derive(Debug, Clone, PartialEq)]
pub struct ServeConfig {
    pub checkpoint: Option<PathBuf>,
    pub max_sessions: usize,
    pub max_volume_mb: usize,
    pub port: u16,
    pub infer: InferConfig,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            checkpoint: None,
            max_sessions: DEFAULT_MAX_SESSIONS,
            max_volume_mb: DEFAULT_MAX_VOLUME_MB,
            port: DEFAULT_PORT,
            infer: InferConfig::default(),
        }
    }
}

impl ServeConfig {
    /// Reads `SEG_CHECKPOINT`, `SEG_MAX_SESSIONS`, `SEG_MAX_VOLUME_MB`
    /// and `SEG_PORT`, keeping defaults for unset variables.
    pub fn from_env() -> promptseg3d::Result<Self> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> promptseg3d::Result<Self> {
        fn num<T: std::str::FromStr>(key: &str, raw: Option<String>, dflt: T) -> promptseg3d::Result<T> {
            match raw {
                None => Ok(dflt),
                Some(s) => s
                    .trim()
                    .parse()
                    .map_err(|_| promptseg3d::Error::Config(format!("{key}={s:?} is not a valid number"))),
            }
        }
        let cfg = ServeConfig {
            checkpoint: get("SEG_CHECKPOINT").filter(|s| !s.is_empty()).map(PathBuf::from),
            max_sessions: num("SEG_MAX_SESSIONS", get("SEG_MAX_SESSIONS"), DEFAULT_MAX_SESSIONS)?,
            max_volume_mb: num("SEG_MAX_VOLUME_MB", get("SEG_MAX_VOLUME_MB"), DEFAULT_MAX_VOLUME_MB)?,
            port: num("SEG_PORT", get("SEG_PORT"), DEFAULT_PORT)?,
            infer: InferConfig::default(),
        };
        if cfg.max_sessions == 0 || cfg.max_volume_mb == 0 {
            return Err(promptseg3d::Error::Config(
                "SEG_MAX_SESSIONS and SEG_MAX_VOLUME_MB must be positive".into(),
            ));
        }
        Ok(cfg)
    }

    pub fn max_volume_bytes(&self) -> usize {
        self.max_volume_mb.saturating_mul(1 << 20)
    }
}

pub type SharedModel = Arc<dyn PatchPredictor + Send + Sync>;

#[derive(Clone)]
pub struct AppState {
    pub model: SharedModel,
    pub sessions: Arc<SessionStore>,
    pub config: Arc<ServeConfig>,
}

impl AppState {
    pub fn new(model: SharedModel, config: ServeConfig) -> Self {
        AppState {
            model,
            sessions: Arc::new(SessionStore::new(config.max_sessions)),
            config: Arc::new(config),
        }
    }
}

pub fn router(state: AppState) -> Router {
    // Leave room for multipart framing around a maximal upload.
    let limit = state.config.max_volume_bytes().saturating_add(64 << 10);
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_info))
        .route("/sessions/{id}/clicks", post(add_click))
        .route("/sessions/{id}/clicks/last", delete(undo_click))
        .route("/sessions/{id}/slices/{axis}/{index}", get(slice))
        .route("/sessions/{id}/mask", get(mask))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Loads the checkpoint and serves until the process is stopped.
pub async fn run(config: ServeConfig) -> promptseg3d::Result<()> {
    let path = config
        .checkpoint
        .clone()
        .ok_or_else(|| promptseg3d::Error::Config("SEG_CHECKPOINT must name a model archive".into()))?;
    let model: promptseg3d::ModelState<f32> = promptseg3d::net3d::load_model(&path)?;
    log::info!("loaded {} (patch {})", path.display(), model.patch_size());
    let addr = std::net::SocketAddr::from(([0, 0, 0, 0], config.port));
    let app = router(AppState::new(Arc::new(model), config));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {addr}");
    axum::serve(listener, app).await?;
    Ok(())
}

impl IntoResponse for ServeError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self {
            ServeError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ServeError::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            ServeError::Protocol(_) => (StatusCode::BAD_REQUEST, "protocol"),
            ServeError::Busy => (StatusCode::SERVICE_UNAVAILABLE, "busy"),
            ServeError::NothingToUndo => (StatusCode::CONFLICT, "nothing_to_undo"),
            ServeError::NotReady => (StatusCode::CONFLICT, "not_ready"),
            ServeError::Parse(_) => (StatusCode::UNPROCESSABLE_ENTITY, "parse"),
            ServeError::TooLarge(_) => (StatusCode::PAYLOAD_TOO_LARGE, "too_large"),
            ServeError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let body = Json(ErrorBody {
            error: kind.to_string(),
            message: self.to_string(),
        });
        let mut resp = (status, body).into_response();
        if self == ServeError::Busy {
            resp.headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from_static(RETRY_AFTER_SECS));
        }
        resp
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub sessions: usize,
    pub patch_size: usize,
}

async fn healthz(State(st): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        sessions: st.sessions.len(),
        patch_size: st.model.patch_size(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub id: String,
    pub dims: Dims,
    pub spacing: Spacing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub dims: Dims,
    pub spacing: Spacing,
    pub status: Status,
    pub click_list: Vec<PointPrompt>,
    pub summary: MaskSummary,
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ServeError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        ServeError::TooLarge(e.body_text())
    } else {
        ServeError::Parse(e.body_text())
    }
}

/// Multipart upload with a required `volume` part and an optional `gt`
/// part, both NIfTI (optionally gzipped).
async fn create_session(State(st): State<AppState>, mut form: Multipart) -> ServeResult<Json<SessionCreated>> {
    let mut volume_bytes = None;
    let mut gt_bytes = None;
    while let Some(field) = form.next_field().await.map_err(multipart_error)? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(multipart_error)?;
        match name.as_str() {
            "volume" => volume_bytes = Some(bytes),
            "gt" => gt_bytes = Some(bytes),
            other => log::debug!("ignoring upload part {other:?}"),
        }
    }
    let volume_bytes = volume_bytes.ok_or_else(|| ServeError::Parse("missing `volume` part".into()))?;
    let limit = st.config.max_volume_bytes();
    let cfg = st.config.clone();
    let data = tokio::task::spawn_blocking(move || -> ServeResult<SessionData> {
        let volume = nifti::decode_volume(&volume_bytes).map_err(|e| ServeError::Parse(e.to_string()))?;
        let bytes = volume.dims.len().saturating_mul(std::mem::size_of::<f32>());
        if bytes > limit {
            return Err(ServeError::TooLarge(format!(
                "volume needs {bytes} bytes, limit is {} MB",
                cfg.max_volume_mb
            )));
        }
        let gt = match gt_bytes {
            Some(b) => {
                let g = nifti::decode_volume(&b).map_err(|e| ServeError::Parse(e.to_string()))?;
                Some(BinaryMask {
                    dims: g.dims,
                    voxels: g.data.iter().map(|&x| x > 0.0).collect(),
                })
            }
            None => None,
        };
        SessionData::new(volume, gt)
    })
    .await
    .map_err(|e| ServeError::Internal(e.to_string()))??;
    let (dims, spacing) = (data.volume.dims, data.volume.spacing);
    let s = st.sessions.insert(data);
    log::info!("created session {} with dims {:?}", s.id, dims.0);
    Ok(Json(SessionCreated {
        id: s.id.clone(),
        dims,
        spacing,
    }))
}

async fn session_info(State(st): State<AppState>, Path(id): Path<String>) -> ServeResult<Json<SessionInfo>> {
    let s = st.sessions.get(&id)?;
    let d = s.data.lock().expect("session lock");
    Ok(Json(SessionInfo {
        id: s.id.clone(),
        dims: d.volume.dims,
        spacing: d.volume.spacing,
        status: s.status(),
        click_list: d.clicks.clone(),
        summary: d.summary(),
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickRequest {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub label: ClickLabel,
}

impl ClickRequest {
    pub fn prompt(&self) -> PointPrompt {
        PointPrompt {
            coord: [self.i, self.j, self.k],
            label: self.label,
        }
    }
}

/// Recomputes the mask for `clicks` off the async runtime and stores
/// it together with the new click list.
async fn recompute(st: &AppState, s: &Arc<Session>, clicks: Vec<PointPrompt>) -> ServeResult<MaskSummary> {
    let input = s.data.lock().expect("session lock").model_input.clone();
    let model = st.model.clone();
    let cfg = st.config.infer;
    let list = clicks.clone();
    let mask = tokio::task::spawn_blocking(move || session::compute_mask(model.as_ref(), &input, &list, cfg))
        .await
        .map_err(|e| ServeError::Internal(e.to_string()))??;
    let mut d = s.data.lock().expect("session lock");
    d.clicks = clicks;
    d.mask = mask;
    Ok(d.summary())
}

async fn add_click(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<ClickRequest>, axum::extract::rejection::JsonRejection>,
) -> ServeResult<Json<MaskSummary>> {
    let Json(req) = body.map_err(|e| ServeError::Validation(e.body_text()))?;
    let s = st.sessions.get(&id)?;
    let _busy = s.try_begin()?;
    let click = req.prompt();
    let clicks = {
        let d = s.data.lock().expect("session lock");
        d.validate_click(&click)?;
        let mut c = d.clicks.clone();
        c.push(click);
        c
    };
    recompute(&st, &s, clicks).await.map(Json)
}

async fn undo_click(State(st): State<AppState>, Path(id): Path<String>) -> ServeResult<Json<MaskSummary>> {
    let s = st.sessions.get(&id)?;
    let _busy = s.try_begin()?;
    let mut clicks = s.data.lock().expect("session lock").clicks.clone();
    if clicks.pop().is_none() {
        return Err(ServeError::NothingToUndo);
    }
    recompute(&st, &s, clicks).await.map(Json)
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
pub struct SliceQuery {
    pub window: Option<f64>,
    pub level: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceResponse {
    pub frame: SliceFrame,
    /// 8-bit grey values, row-major with `frame.width` pixels per row.
    pub pixels_b64: String,
    /// Run lengths of the mask over the same pixel order, starting with
    /// a background run.
    pub mask_rle: Vec<u64>,
}

async fn slice(
    State(st): State<AppState>,
    Path((id, axis, index)): Path<(String, String, usize)>,
    Query(q): Query<SliceQuery>,
) -> ServeResult<Json<SliceResponse>> {
    let axis: Axis = axis.parse()?;
    let s = st.sessions.get(&id)?;
    let d = s.data.lock().expect("session lock");
    let r = render_slice(&d.volume, d.mask.as_ref(), axis, index, q.window, q.level)?;
    Ok(Json(SliceResponse {
        frame: r.frame,
        pixels_b64: base64::engine::general_purpose::STANDARD.encode(&r.pixels),
        mask_rle: r.mask_rle,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskFormat {
    #[default]
    Rle,
    Nifti,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
pub struct MaskQuery {
    #[serde(default)]
    pub format: MaskFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRle {
    pub dims: Dims,
    /// Runs over the linear voxel order (x fastest), starting with a
    /// background run.
    pub rle: Vec<u64>,
}

async fn mask(
    State(st): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<MaskQuery>, axum::extract::rejection::QueryRejection>,
) -> ServeResult<Response> {
    let Query(q) = q.map_err(|e| ServeError::Validation(e.body_text()))?;
    let s = st.sessions.get(&id)?;
    let d = s.data.lock().expect("session lock");
    let m = d.mask.as_ref().ok_or(ServeError::NotReady)?;
    Ok(match q.format {
        MaskFormat::Rle => Json(MaskRle {
            dims: m.dims,
            rle: m.to_rle(),
        })
        .into_response(),
        MaskFormat::Nifti => {
            let bytes = nifti::encode_mask(m, d.volume.spacing, d.volume.origin, true);
            (
                [
                    (header::CONTENT_TYPE, "application/gzip"),
                    (header::CONTENT_DISPOSITION, "attachment; filename=\"mask.nii.gz\""),
                ],
                bytes,
            )
                .into_response()
        }
    })
}
