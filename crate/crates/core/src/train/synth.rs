//! Synthetic volumes with one embedded target, for desk-scale training.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::curate::{filter_by_shape, DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::nifti;
use crate::voxgrid::{BinaryMask, Dims, LabelVolume, Spacing, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipsoid,
    Tube,
    MultiBlob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub count: usize,
    pub family: ShapeFamily,
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    /// Diameter range of the target, mm.
    pub size_range_mm: (f64, f64),
    /// Target intensity above the zero background.
    pub contrast_range: (f64, f64),
    /// Standard deviation of additive Gaussian noise.
    pub noise_level: f64,
    pub val_fraction: f64,
    /// Probability that a case's label is corrupted: dilated by one voxel
    /// and sprinkled with isolated specks (so curation flags it).
    pub label_noise: f64,
    pub class_name: String,
    pub modality_tag: String,
    pub anatomy_tag: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 8,
            family: ShapeFamily::Ellipsoid,
            dims: [64, 64, 64],
            spacing_mm: 1.5,
            size_range_mm: (30.0, 54.0),
            contrast_range: (0.6, 1.0),
            noise_level: 0.1,
            val_fraction: 0.0,
            label_noise: 0.0,
            class_name: "target".into(),
            modality_tag: "synthetic".into(),
            anatomy_tag: "phantom".into(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        let (lo, hi) = self.size_range_mm;
        // one voxel of slack so rasterization never falls under the extent threshold
        if lo < crate::curate::MIN_EXTENT_MM + 2.0 * self.spacing_mm || hi < lo {
            return bad("size range must start at least two voxels above 15 mm");
        }
        let span = self.dims.iter().copied().min().unwrap_or(0) as f64 * self.spacing_mm;
        if hi + 2.0 * self.spacing_mm > span {
            return bad("largest target does not fit in the volume");
        }
        if self.contrast_range.0 <= 0.0 || self.contrast_range.1 < self.contrast_range.0 {
            return bad("contrast range must be positive and ordered");
        }
        if self.noise_level < 0.0
            || !(0.0..=1.0).contains(&self.val_fraction)
            || !(0.0..=1.0).contains(&self.label_noise)
        {
            return bad("noise, validation fraction and label noise must be non-negative fractions");
        }
        Ok(())
    }

    fn spacing(&self) -> Spacing {
        Spacing::iso(self.spacing_mm)
    }
}

/// One generated case. `clean` is the true shape; `labels` may be
/// corrupted when label noise is on.
#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub id: String,
    pub volume: Volume,
    pub labels: LabelVolume,
    pub clean: BinaryMask,
    pub corrupted: bool,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Centre (voxels) such that a ball of `radius` voxels stays one voxel
/// inside the volume.
fn centre<R: Rng + ?Sized>(rng: &mut R, dims: Dims, radius: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|a| {
        let lo = radius[a] + 1.0;
        let hi = dims.0[a] as f64 - 2.0 - radius[a];
        uniform(rng, (lo, hi.max(lo)))
    })
}

fn rasterize(dims: Dims, inside: impl Fn([f64; 3]) -> bool) -> BinaryMask {
    let voxels = (0..dims.len())
        .map(|i| inside(dims.coord(i).map(|c| c as f64)))
        .collect();
    BinaryMask { dims, voxels }
}

fn ellipsoid<R: Rng + ?Sized>(rng: &mut R, spec: &SyntheticSpec, dims: Dims) -> BinaryMask {
    let r: [f64; 3] = std::array::from_fn(|_| uniform(rng, spec.size_range_mm) / 2.0 / spec.spacing_mm);
    let c = centre(rng, dims, r);
    rasterize(dims, |p| {
        (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
    })
}

fn tube<R: Rng + ?Sized>(rng: &mut R, spec: &SyntheticSpec, dims: Dims) -> BinaryMask {
    let radius = spec.size_range_mm.0 / 2.0 / spec.spacing_mm;
    let half_len = uniform(rng, spec.size_range_mm) / 2.0 / spec.spacing_mm;
    let dir = loop {
        let d: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            break d.map(|v| v / n);
        }
    };
    let reach: [f64; 3] = std::array::from_fn(|a| dir[a].abs() * half_len + radius);
    let c = centre(rng, dims, reach);
    rasterize(dims, |p| {
        let d: [f64; 3] = std::array::from_fn(|a| p[a] - c[a]);
        let t = (d[0] * dir[0] + d[1] * dir[1] + d[2] * dir[2]).clamp(-half_len, half_len);
        (0..3).map(|a| (d[a] - t * dir[a]).powi(2)).sum::<f64>() <= radius * radius
    })
}

fn multi_blob<R: Rng + ?Sized>(rng: &mut R, spec: &SyntheticSpec, dims: Dims) -> BinaryMask {
    let n = rng.gen_range(2..=3);
    let balls: Vec<([f64; 3], f64)> = (0..n)
        .map(|_| {
            let r = uniform(rng, spec.size_range_mm) / 2.0 / spec.spacing_mm;
            (centre(rng, dims, [r; 3]), r)
        })
        .collect();
    rasterize(dims, |p| {
        balls
            .iter()
            .any(|(c, r)| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= r * r)
    })
}

fn dilate(m: &BinaryMask) -> BinaryMask {
    let mut out = m.clone();
    for i in m.foreground() {
        let c = m.dims.coord(i).map(|v| v as i64);
        for (a, s) in [(0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)] {
            let mut q = c;
            q[a] += s;
            if m.dims.contains_signed(q) {
                out.voxels[m.dims.index(q.map(|v| v as usize))] = true;
            }
        }
    }
    out
}

/// Isolated single-voxel specks added to corrupted labels; more than the
/// five components curation keeps.
const SPECKS: usize = 8;

fn isolated(m: &BinaryMask, i: usize) -> bool {
    let c = m.dims.coord(i).map(|v| v as i64);
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                let q = [c[0] + dx, c[1] + dy, c[2] + dz];
                if m.dims.contains_signed(q) && m.voxels[m.dims.index(q.map(|v| v as usize))] {
                    return false;
                }
            }
        }
    }
    true
}

/// Generates one case. Deterministic in `rng`.
pub fn synthesize_case<R: Rng + ?Sized>(spec: &SyntheticSpec, id: &str, rng: &mut R) -> Result<SyntheticCase> {
    spec.validate()?;
    let dims = Dims(spec.dims);
    let spacing = spec.spacing();
    let clean = loop {
        let m = match spec.family {
            ShapeFamily::Ellipsoid => ellipsoid(rng, spec, dims),
            ShapeFamily::Tube => tube(rng, spec, dims),
            ShapeFamily::MultiBlob => multi_blob(rng, spec, dims),
        };
        if filter_by_shape(&m, spacing) {
            break m;
        }
    };
    let contrast = uniform(rng, spec.contrast_range) as f32;
    let noise = Normal::new(0.0, spec.noise_level.max(0.0)).expect("finite noise level");
    let data = clean
        .voxels
        .iter()
        .map(|&f| {
            let base = if f { contrast } else { 0.0 };
            if spec.noise_level > 0.0 {
                base + noise.sample(rng) as f32
            } else {
                base
            }
        })
        .collect();
    let volume = Volume::new(dims, spacing, data)?;

    let corrupted = rng.gen_bool(spec.label_noise);
    let mut label_mask = clean.clone();
    if corrupted {
        label_mask = dilate(&label_mask);
        let mut placed = 0;
        while placed < SPECKS {
            let i = rng.gen_range(0..dims.len());
            if isolated(&label_mask, i) {
                label_mask.voxels[i] = true;
                placed += 1;
            }
        }
    }
    let labels = LabelVolume::new(
        dims,
        spacing,
        label_mask.voxels.iter().map(|&b| b as u32).collect(),
        BTreeMap::from([(1, spec.class_name.clone())]),
    )?;
    Ok(SyntheticCase {
        id: id.to_string(),
        volume,
        labels,
        clean,
        corrupted,
    })
}

/// Generates `spec.count` cases; the last `round(count · val_fraction)`
/// are validation cases.
pub fn generate_cases<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<Vec<SyntheticCase>> {
    (0..spec.count)
        .map(|i| synthesize_case(spec, &format!("synth_{i:03}"), rng))
        .collect()
}

fn val_count(spec: &SyntheticSpec) -> usize {
    (spec.count as f64 * spec.val_fraction).round() as usize
}

/// Writes generated cases as NIfTI under `out_dir/{images,labels}` plus
/// `out_dir/manifest.json`.
pub fn make_synthetic_dataset<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    rng: &mut R,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let cases = generate_cases(spec, rng)?;
    write_cases(spec, &cases, out_dir)
}

pub fn write_cases(spec: &SyntheticSpec, cases: &[SyntheticCase], out_dir: &Path) -> Result<DatasetManifest> {
    for sub in ["images", "labels"] {
        std::fs::create_dir_all(out_dir.join(sub))?;
    }
    let n_val = val_count(spec);
    let mut entries = Vec::with_capacity(cases.len());
    for (i, c) in cases.iter().enumerate() {
        let img = Path::new("images").join(format!("{}.nii.gz", c.id));
        let lab = Path::new("labels").join(format!("{}.nii.gz", c.id));
        nifti::write_volume(&out_dir.join(&img), &c.volume)?;
        nifti::write_labels(&out_dir.join(&lab), &c.labels)?;
        entries.push(ManifestEntry {
            case_id: Some(c.id.clone()),
            image_path: img,
            label_path: lab,
            class_map: c.labels.class_map.clone(),
            modality_tag: spec.modality_tag.clone(),
            anatomy_tag: spec.anatomy_tag.clone(),
            split_tag: if i + n_val >= cases.len() {
                Split::Val
            } else {
                Split::Train
            },
            seen: None,
        });
    }
    let m = DatasetManifest::new(entries);
    m.save(&out_dir.join("manifest.json"))?;
    DatasetManifest::load(&out_dir.join("manifest.json"))
}
