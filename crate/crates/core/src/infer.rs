//! Whole-volume inference from a fixed-size network input.
//!
//! The first window is centred on the first click. When its prediction
//! touches a window face, a window shifted by half the patch size in that
//! direction is added, provided the first click is still visible in it:
//! inside, or within the face margin of its edge. Only the first window's
//! faces spawn extensions, so at most seven windows run. Overlapping
//! probabilities are averaged and thresholded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net3d::{ModelState, Scalar};
use crate::voxgrid::{BinaryMask, ClickLabel, Dims, PointPrompt, Volume};

/// Anything that maps a cubic patch and patch-local clicks to per-voxel
/// foreground probabilities.
pub trait PatchPredictor: Sync {
    fn patch_size(&self) -> usize;

    fn predict_patch(&self, patch: &Volume, local: &[PointPrompt]) -> Result<Vec<f32>>;
}

impl<T: Scalar> PatchPredictor for ModelState<T> {
    fn patch_size(&self) -> usize {
        self.config.patch_input_size
    }

    fn predict_patch(&self, patch: &Volume, local: &[PointPrompt]) -> Result<Vec<f32>> {
        Ok(self
            .forward(patch, local)?
            .into_iter()
            .map(|p| p.f64() as f32)
            .collect())
    }
}

/// One of the six faces of a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Face {
    pub axis: usize,
    pub positive: bool,
}

impl Face {
    pub const ALL: [Face; 6] = [
        Face {
            axis: 0,
            positive: false,
        },
        Face {
            axis: 0,
            positive: true,
        },
        Face {
            axis: 1,
            positive: false,
        },
        Face {
            axis: 1,
            positive: true,
        },
        Face {
            axis: 2,
            positive: false,
        },
        Face {
            axis: 2,
            positive: true,
        },
    ];

    pub fn name(&self) -> &'static str {
        const N: [&str; 6] = ["-x", "+x", "-y", "+y", "-z", "+z"];
        N[self.axis * 2 + self.positive as usize]
    }
}

/// Window origin along one axis for a point at `p` on an axis of length `len`.
fn axis_origin(p: usize, len: usize, size: usize) -> i64 {
    if len >= size {
        (p as i64 - (size / 2) as i64).clamp(0, (len - size) as i64)
    } else {
        -(((size - len) / 2) as i64)
    }
}

/// Window origin (volume frame, may be negative when padded) that centres
/// `p`, clamped to the volume.
pub fn window_origin(dims: Dims, p: [usize; 3], size: usize) -> [i64; 3] {
    std::array::from_fn(|a| axis_origin(p[a], dims.0[a], size))
}

/// Cuts a `size³` window at `origin`, zero outside the volume.
pub fn extract_window(v: &Volume, origin: [i64; 3], size: usize) -> Volume {
    let wd = Dims::cube(size);
    let mut data = vec![0.0f32; wd.len()];
    let [nx, ny, nz] = v.dims.0.map(|n| n as i64);
    for z in 0..size {
        let vz = origin[2] + z as i64;
        if vz < 0 || vz >= nz {
            continue;
        }
        for y in 0..size {
            let vy = origin[1] + y as i64;
            if vy < 0 || vy >= ny {
                continue;
            }
            let x0 = origin[0].max(0);
            let x1 = (origin[0] + size as i64).min(nx);
            if x0 >= x1 {
                continue;
            }
            let src = v.dims.index([x0 as usize, vy as usize, vz as usize]);
            let dst = wd.index([(x0 - origin[0]) as usize, y, z]);
            let n = (x1 - x0) as usize;
            data[dst..dst + n].copy_from_slice(&v.data[src..src + n]);
        }
    }
    Volume {
        dims: wd,
        spacing: v.spacing,
        origin: v.origin,
        orientation: v.orientation,
        data,
    }
}

/// Mask counterpart of [`extract_window`]; padding is background.
pub fn extract_mask_window(m: &BinaryMask, origin: [i64; 3], size: usize) -> BinaryMask {
    let wd = Dims::cube(size);
    let mut out = BinaryMask::empty(wd);
    for (i, v) in out.voxels.iter_mut().enumerate() {
        let c = wd.coord(i);
        let g: [i64; 3] = std::array::from_fn(|a| origin[a] + c[a] as i64);
        if m.dims.contains_signed(g) {
            *v = m.voxels[m.dims.index(g.map(|x| x as usize))];
        }
    }
    out
}

/// Crop of `size³` around `p`, zero-padded where the volume is smaller.
pub fn crop_patch(v: &Volume, p: &PointPrompt, size: usize) -> Result<(Volume, [i64; 3])> {
    if !v.dims.contains(p.coord) {
        return Err(Error::OutOfBounds(p.coord));
    }
    let origin = window_origin(v.dims, p.coord, size);
    Ok((extract_window(v, origin, size), origin))
}

/// Faces with a foreground voxel within `margin` voxels.
pub fn faces_with_foreground(pred: &BinaryMask, margin: usize) -> Vec<Face> {
    let d = pred.dims;
    let mut hit = [false; 6];
    for i in pred.foreground() {
        let c = d.coord(i);
        for a in 0..3 {
            if c[a] < margin {
                hit[a * 2] = true;
            }
            if c[a] + margin >= d.0[a] {
                hit[a * 2 + 1] = true;
            }
        }
        if hit.iter().all(|&h| h) {
            break;
        }
    }
    Face::ALL
        .into_iter()
        .filter(|f| hit[f.axis * 2 + f.positive as usize])
        .collect()
}

/// Clicks within `tolerance` voxels of the window at `origin`, in window
/// coordinates. Clicks in the tolerance band are snapped onto the nearest
/// edge voxel.
pub fn localize_clicks(clicks: &[PointPrompt], origin: [i64; 3], size: usize, tolerance: usize) -> Vec<PointPrompt> {
    clicks
        .iter()
        .filter(|c| window_contains(origin, size, tolerance, c.coord))
        .map(|c| PointPrompt {
            coord: std::array::from_fn(|a| (c.coord[a] as i64 - origin[a]).clamp(0, size as i64 - 1) as usize),
            label: c.label,
        })
        .collect()
}

fn window_contains(origin: [i64; 3], size: usize, tolerance: usize, p: [usize; 3]) -> bool {
    let t = tolerance as i64;
    (0..3).all(|a| {
        let v = p[a] as i64 - origin[a];
        v >= -t && v < size as i64 + t
    })
}

/// Per-voxel mean probability over covering windows; uncovered voxels get
/// 0. The result does not depend on window order.
pub fn fuse_probabilities(windows: &[([i64; 3], Vec<f32>)], size: usize, dims: Dims) -> Vec<f64> {
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.sort_by_key(|&i| windows[i].0);
    let mut sum = vec![0.0f64; dims.len()];
    let mut count = vec![0u32; dims.len()];
    let wd = Dims::cube(size);
    for &wi in &order {
        let (origin, probs) = &windows[wi];
        assert_eq!(probs.len(), wd.len(), "window probability grid has wrong size");
        for z in 0..size {
            let vz = origin[2] + z as i64;
            if vz < 0 || vz >= dims.0[2] as i64 {
                continue;
            }
            for y in 0..size {
                let vy = origin[1] + y as i64;
                if vy < 0 || vy >= dims.0[1] as i64 {
                    continue;
                }
                for x in 0..size {
                    let vx = origin[0] + x as i64;
                    if vx < 0 || vx >= dims.0[0] as i64 {
                        continue;
                    }
                    let gi = dims.index([vx as usize, vy as usize, vz as usize]);
                    sum[gi] += probs[wd.index([x, y, z])] as f64;
                    count[gi] += 1;
                }
            }
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect()
}

/// Averages window probabilities and keeps voxels above `threshold`.
pub fn fuse(windows: &[([i64; 3], Vec<f32>)], size: usize, dims: Dims, threshold: f64) -> BinaryMask {
    let mean = fuse_probabilities(windows, size, dims);
    BinaryMask {
        dims,
        voxels: mean.iter().map(|&p| p > threshold).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub threshold: f64,
    /// Width of the band next to each face that counts as touching it.
    pub face_margin: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            threshold: 0.5,
            face_margin: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub mask: BinaryMask,
    /// Origins of the processed windows, the initial one first.
    pub windows: Vec<[i64; 3]>,
}

/// Segments the whole volume from clicks in volume coordinates.
pub fn segment_volume<P: PatchPredictor + ?Sized>(
    v: &Volume,
    clicks: &[PointPrompt],
    model: &P,
    cfg: InferConfig,
) -> Result<Segmentation> {
    let first = clicks
        .first()
        .ok_or_else(|| Error::Config("at least one click is required".into()))?;
    if let Some(c) = clicks.iter().find(|c| !v.dims.contains(c.coord)) {
        return Err(Error::OutOfBounds(c.coord));
    }
    if first.label != ClickLabel::Positive {
        return Err(Error::Config("the first click must be positive".into()));
    }
    let size = model.patch_size();
    let run = |origin: [i64; 3]| -> Result<Vec<f32>> {
        let patch = extract_window(v, origin, size);
        let local = localize_clicks(clicks, origin, size, cfg.face_margin);
        let probs = model.predict_patch(&patch, &local)?;
        if probs.len() != size.pow(3) {
            return Err(Error::Shape(format!(
                "predictor returned {} values for a {size}³ patch",
                probs.len()
            )));
        }
        Ok(probs)
    };

    let origin0 = window_origin(v.dims, first.coord, size);
    let probs0 = run(origin0)?;
    let pred0 = BinaryMask {
        dims: Dims::cube(size),
        voxels: probs0.iter().map(|&p| p as f64 > cfg.threshold).collect(),
    };
    let mut origins = vec![origin0];
    let mut results = vec![(origin0, probs0)];
    let stride = (size / 2) as i64;
    for face in faces_with_foreground(&pred0, cfg.face_margin) {
        let a = face.axis;
        let len = v.dims.0[a];
        if len <= size {
            continue;
        }
        let mut o = origin0;
        o[a] += if face.positive { stride } else { -stride };
        o[a] = o[a].clamp(0, (len - size) as i64);
        if origins.contains(&o) || !window_contains(o, size, cfg.face_margin, first.coord) {
            continue;
        }
        let probs = run(o)?;
        origins.push(o);
        results.push((o, probs));
    }
    Ok(Segmentation {
        mask: fuse(&results, size, v.dims, cfg.threshold),
        windows: origins,
    })
}
