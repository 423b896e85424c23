//! Session state and the pure operations behind each endpoint.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use promptseg3d::infer::{segment_volume, InferConfig, PatchPredictor};
use promptseg3d::train::{normalize_intensity, Normalization};
use promptseg3d::voxgrid::{bounding_box, dice, encode_rle, BoundingBox};
use promptseg3d::{BinaryMask, ClickLabel, Dims, PointPrompt, Volume};
use serde::{Deserialize, Serialize};

/// Failures mapped onto HTTP statuses by the router.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServeError {
    NotFound(String),
    Validation(String),
    Protocol(String),
    Busy,
    NothingToUndo,
    NotReady,
    Parse(String),
    TooLarge(String),
    Internal(String),
}

impl std::fmt::Display for ServeError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ServeError::NotFound(m) => write!(f, "not found: {m}"),
            ServeError::Validation(m) => write!(f, "invalid request: {m}"),
            ServeError::Protocol(m) => write!(f, "protocol violation: {m}"),
            ServeError::Busy => write!(f, "session is busy, retry later"),
            ServeError::NothingToUndo => write!(f, "no clicks to undo"),
            ServeError::NotReady => write!(f, "no mask has been computed yet"),
            ServeError::Parse(m) => write!(f, "could not parse upload: {m}"),
            ServeError::TooLarge(m) => write!(f, "payload too large: {m}"),
            ServeError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

pub type ServeResult<T> = Result<T, ServeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Idle,
    Running,
}

/// What a client learns after a click or an undo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub clicks: usize,
    pub mask_voxels: usize,
    pub bbox: Option<BoundingBox>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SessionData {
    /// Intensities as uploaded, used for display.
    pub volume: Volume,
    /// Normalized intensities fed to the model.
    pub model_input: Volume,
    pub gt: Option<BinaryMask>,
    pub clicks: Vec<PointPrompt>,
    pub mask: Option<BinaryMask>,
    pub created_at: SystemTime,
}

impl SessionData {
    pub fn new(volume: Volume, gt: Option<BinaryMask>) -> ServeResult<Self> {
        if let Some(g) = &gt {
            if g.dims != volume.dims {
                return Err(ServeError::Validation(
                    "ground truth dims differ from the volume".into(),
                ));
            }
        }
        let model_input = normalize_intensity(&volume, &Normalization::default());
        Ok(SessionData {
            volume,
            model_input,
            gt,
            clicks: Vec::new(),
            mask: None,
            created_at: SystemTime::now(),
        })
    }

    pub fn summary(&self) -> MaskSummary {
        let (voxels, bbox) = match &self.mask {
            Some(m) => (m.count(), bounding_box(m)),
            None => (0, None),
        };
        let dice = match (&self.mask, &self.gt) {
            (Some(m), Some(g)) => dice(m, g).ok(),
            _ => None,
        };
        MaskSummary {
            clicks: self.clicks.len(),
            mask_voxels: voxels,
            bbox,
            dice,
        }
    }

    /// Checks a click against bounds and the first-click rule.
    pub fn validate_click(&self, c: &PointPrompt) -> ServeResult<()> {
        if !self.volume.dims.contains(c.coord) {
            return Err(ServeError::Validation(format!(
                "click {:?} outside volume of dims {:?}",
                c.coord, self.volume.dims.0
            )));
        }
        if self.clicks.is_empty() && c.label != ClickLabel::Positive {
            return Err(ServeError::Protocol("the first click must be positive".into()));
        }
        Ok(())
    }
}

/// Mask for a click list; `None` when the list is empty.
pub fn compute_mask(
    model: &dyn PatchPredictor,
    input: &Volume,
    clicks: &[PointPrompt],
    cfg: InferConfig,
) -> ServeResult<Option<BinaryMask>> {
    if clicks.is_empty() {
        return Ok(None);
    }
    segment_volume(input, clicks, model, cfg)
        .map(|s| Some(s.mask))
        .map_err(|e| ServeError::Internal(e.to_string()))
}

/// One live session. Mutating requests hold `busy` for their whole
/// duration, so they never interleave.
pub struct Session {
    pub id: String,
    pub data: Mutex<SessionData>,
    busy: AtomicBool,
}

/// Releases the busy flag on drop.
pub struct BusyGuard(Arc<Session>);

impl Drop for BusyGuard {
    fn drop(&mut self) {
        self.0.busy.store(false, Ordering::Release);
    }
}

impl Session {
    pub fn new(id: String, data: SessionData) -> Self {
        Session {
            id,
            data: Mutex::new(data),
            busy: AtomicBool::new(false),
        }
    }

    pub fn try_begin(self: &Arc<Self>) -> ServeResult<BusyGuard> {
        self.busy
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .map(|_| BusyGuard(self.clone()))
            .map_err(|_| ServeError::Busy)
    }

    pub fn status(&self) -> Status {
        if self.busy.load(Ordering::Acquire) {
            Status::Running
        } else {
            Status::Idle
        }
    }

    pub fn snapshot(&self) -> SessionData {
        self.data.lock().expect("session lock").clone()
    }
}

/// Sessions keyed by id, evicting the least recently used beyond
/// `capacity`.
pub struct SessionStore {
    capacity: usize,
    inner: Mutex<StoreInner>,
}

struct StoreInner {
    tick: u64,
    map: HashMap<String, (u64, Arc<Session>)>,
}

impl SessionStore {
    pub fn new(capacity: usize) -> Self {
        SessionStore {
            capacity: capacity.max(1),
            inner: Mutex::new(StoreInner {
                tick: 0,
                map: HashMap::new(),
            }),
        }
    }

    pub fn insert(&self, data: SessionData) -> Arc<Session> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let s = Arc::new(Session::new(id.clone(), data));
        let mut g = self.inner.lock().expect("store lock");
        while g.map.len() >= self.capacity {
            let oldest = g
                .map
                .iter()
                .min_by_key(|(_, (t, _))| *t)
                .map(|(k, _)| k.clone())
                .expect("nonempty map");
            log::info!("evicting session {oldest}");
            g.map.remove(&oldest);
        }
        g.tick += 1;
        let t = g.tick;
        g.map.insert(id, (t, s.clone()));
        s
    }

    pub fn get(&self, id: &str) -> ServeResult<Arc<Session>> {
        let mut g = self.inner.lock().expect("store lock");
        g.tick += 1;
        let t = g.tick;
        match g.map.get_mut(id) {
            Some(entry) => {
                entry.0 = t;
                Ok(entry.1.clone())
            }
            None => Err(ServeError::NotFound(format!("session {id}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("store lock").map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Axial,
    Coronal,
    Sagittal,
}

impl std::str::FromStr for Axis {
    type Err = ServeError;
    fn from_str(s: &str) -> ServeResult<Self> {
        match s {
            "axial" => Ok(Axis::Axial),
            "coronal" => Ok(Axis::Coronal),
            "sagittal" => Ok(Axis::Sagittal),
            _ => Err(ServeError::Validation(format!("unknown axis {s}"))),
        }
    }
}

impl Axis {
    /// Volume axis fixed by the slice index.
    pub fn normal(&self) -> usize {
        match self {
            Axis::Axial => 2,
            Axis::Coronal => 1,
            Axis::Sagittal => 0,
        }
    }

    /// Volume axes along pixel columns (`u`) and rows (`v`).
    pub fn plane(&self) -> (usize, usize) {
        match self {
            Axis::Axial => (0, 1),
            Axis::Coronal => (0, 2),
            Axis::Sagittal => (1, 2),
        }
    }
}

/// How slice pixels map to voxels: pixel `(u, v)` sits at byte
/// `v·width + u` and shows voxel with `coord[u_axis] = u`,
/// `coord[v_axis] = v`, `coord[normal_axis] = index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceFrame {
    pub axis: Axis,
    pub index: usize,
    pub width: usize,
    pub height: usize,
    pub u_axis: usize,
    pub v_axis: usize,
    pub normal_axis: usize,
}

impl SliceFrame {
    pub fn new(dims: Dims, axis: Axis, index: usize) -> ServeResult<Self> {
        let n = axis.normal();
        if index >= dims.0[n] {
            return Err(ServeError::Validation(format!(
                "slice {index} outside axis of length {}",
                dims.0[n]
            )));
        }
        let (u, v) = axis.plane();
        Ok(SliceFrame {
            axis,
            index,
            width: dims.0[u],
            height: dims.0[v],
            u_axis: u,
            v_axis: v,
            normal_axis: n,
        })
    }

    pub fn voxel(&self, u: usize, v: usize) -> [usize; 3] {
        let mut c = [0; 3];
        c[self.u_axis] = u;
        c[self.v_axis] = v;
        c[self.normal_axis] = self.index;
        c
    }

    /// Pixel showing `voxel`, when the voxel lies on this slice.
    pub fn pixel(&self, voxel: [usize; 3]) -> Option<(usize, usize)> {
        (voxel[self.normal_axis] == self.index).then_some((voxel[self.u_axis], voxel[self.v_axis]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSlice {
    pub frame: SliceFrame,
    pub pixels: Vec<u8>,
    pub mask_rle: Vec<u64>,
}

/// Window/level mapping to 8 bits. Defaults cover the full intensity
/// range.
pub fn render_slice(
    volume: &Volume,
    mask: Option<&BinaryMask>,
    axis: Axis,
    index: usize,
    window: Option<f64>,
    level: Option<f64>,
) -> ServeResult<RenderedSlice> {
    let frame = SliceFrame::new(volume.dims, axis, index)?;
    let (lo, hi) = volume.min_max();
    let window = window.unwrap_or((hi - lo) as f64).max(f64::EPSILON);
    let level = level.unwrap_or((lo as f64 + hi as f64) / 2.0);
    if !window.is_finite() || !level.is_finite() {
        return Err(ServeError::Validation("window and level must be finite".into()));
    }
    let bottom = level - window / 2.0;
    let mut pixels = Vec::with_capacity(frame.width * frame.height);
    let mut bits = Vec::with_capacity(frame.width * frame.height);
    for v in 0..frame.height {
        for u in 0..frame.width {
            let c = frame.voxel(u, v);
            let x = volume.get(c) as f64;
            pixels.push((((x - bottom) / window).clamp(0.0, 1.0) * 255.0).round() as u8);
            bits.push(mask.is_some_and(|m| m.get(c)));
        }
    }
    Ok(RenderedSlice {
        frame,
        pixels,
        mask_rle: encode_rle(&bits),
    })
}
