//! Label cleaning before training.
//!
//! Each class of each case goes through four steps in order:
//! 1. shape: drop masks under 1 cm³ or with any extent under 15 mm;
//! 2. background: drop masks covering less than 1% of the volume;
//! 3. denoise: keep only the five largest connected components;
//! 4. symmetry: split declared paired organs into left and right classes.
//!
//! Outputs of steps 3 and 4 are checked against steps 1 and 2 again so a
//! second pass over curated data changes nothing.

mod manifest;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use manifest::{DatasetManifest, ManifestEntry, Split};

use crate::error::{Error, Result};
use crate::nifti;
use crate::voxgrid::{
    bounding_extent, connected_components, physical_volume, BinaryMask, Connectivity, LabelVolume, Spacing,
};

/// Smallest kept mask volume, mm³.
pub const MIN_VOLUME_MM3: f64 = 1000.0;
/// Smallest kept extent along any axis, mm.
pub const MIN_EXTENT_MM: f64 = 15.0;
/// Masks covering less than this percentage of the volume are dropped.
pub const MIN_FOREGROUND_PERCENT: u64 = 1;
/// Components kept by denoising.
pub const KEEP_COMPONENTS: usize = 5;

/// Absorbs representation error of spacings like 0.1 mm in the physical
/// thresholds; far below one voxel of any real spacing.
const PHYSICAL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurateConfig {
    /// Class names split into left/right halves (case-insensitive).
    pub symmetric_classes: Vec<String>,
    pub connectivity: Connectivity,
    /// Axis whose midplane separates left from right. In the canonical
    /// frame low x is the subject's left.
    pub midplane_axis: usize,
    pub keep_components: usize,
    pub min_volume_mm3: f64,
    pub min_extent_mm: f64,
    pub min_foreground_percent: u64,
}

impl Default for CurateConfig {
    fn default() -> Self {
        CurateConfig {
            symmetric_classes: Vec::new(),
            connectivity: Connectivity::TwentySix,
            midplane_axis: 0,
            keep_components: KEEP_COMPONENTS,
            min_volume_mm3: MIN_VOLUME_MM3,
            min_extent_mm: MIN_EXTENT_MM,
            min_foreground_percent: MIN_FOREGROUND_PERCENT,
        }
    }
}

impl CurateConfig {
    fn is_symmetric(&self, name: &str) -> bool {
        self.symmetric_classes.iter().any(|s| s.eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Step {
    Shape,
    Background,
    None,
}

/// Decision for one output mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationRecord {
    pub case_id: String,
    /// Name of the class in the input labels.
    pub source_class: String,
    /// Name of the output mask (differs from `source_class` after a split).
    pub class_name: String,
    /// Id in the curated label file; `None` when dropped.
    pub class_id: Option<u32>,
    pub step_triggered: Step,
    pub kept: bool,
    pub components_removed: usize,
    pub symmetric_split: Option<(String, String)>,
    pub voxels: usize,
    pub foreground_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCase {
    pub case_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub records: Vec<CurationRecord>,
    pub skipped: Vec<SkippedCase>,
}

impl CurationReport {
    pub fn for_case<'a>(&'a self, case_id: &'a str) -> impl Iterator<Item = &'a CurationRecord> + 'a {
        self.records.iter().filter(move |r| r.case_id == case_id)
    }

    /// One JSON record per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        let records = raw
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(CurationReport {
            records,
            skipped: Vec::new(),
        })
    }
}

fn shape_ok(m: &BinaryMask, spacing: Spacing, cfg: &CurateConfig) -> bool {
    if m.is_empty() {
        return false;
    }
    if physical_volume(m, spacing) + PHYSICAL_TOLERANCE < cfg.min_volume_mm3 {
        return false;
    }
    match bounding_extent(m, spacing) {
        Ok(ext) => ext.iter().all(|&e| e + PHYSICAL_TOLERANCE >= cfg.min_extent_mm),
        Err(_) => false,
    }
}

/// Keeps masks of at least 1 cm³ whose extent reaches 15 mm on every axis.
pub fn filter_by_shape(m: &BinaryMask, spacing: Spacing) -> bool {
    shape_ok(m, spacing, &CurateConfig::default())
}

/// Integer form of "background exceeds 99%": drop iff `100·fg < total`.
pub fn background_keep(foreground: usize, total: usize, min_percent: u64) -> bool {
    (foreground as u128) * 100 >= (total as u128) * min_percent as u128
}

/// Per-class keep decision of the background filter.
pub fn filter_by_background(lv: &LabelVolume) -> BTreeMap<u32, bool> {
    let mut counts: BTreeMap<u32, usize> = lv.class_map.keys().map(|&k| (k, 0)).collect();
    for &l in &lv.labels {
        if let Some(c) = counts.get_mut(&l) {
            *c += 1;
        }
    }
    let total = lv.labels.len();
    counts
        .into_iter()
        .map(|(k, c)| (k, background_keep(c, total, MIN_FOREGROUND_PERCENT)))
        .collect()
}

/// Union of the `keep` largest components, and how many were removed.
pub fn denoise_components_with(m: &BinaryMask, connectivity: Connectivity, keep: usize) -> (BinaryMask, usize) {
    let comps = connected_components(m, connectivity);
    if comps.len() <= keep {
        return (m.clone(), 0);
    }
    let mut out = BinaryMask::empty(m.dims);
    for c in &comps[..keep] {
        for &i in &c.voxels {
            out.voxels[i] = true;
        }
    }
    (out, comps.len() - keep)
}

/// Keeps the five largest 26-connected components.
pub fn denoise_components(m: &BinaryMask) -> BinaryMask {
    denoise_components_with(m, Connectivity::TwentySix, KEEP_COMPONENTS).0
}

/// Assigns each component wholly to the low ("left") or high side of the
/// midplane by its centroid. A centroid exactly on the midplane goes left.
pub fn split_mask(m: &BinaryMask, axis: usize, connectivity: Connectivity) -> Result<(BinaryMask, BinaryMask)> {
    if axis > 2 {
        return Err(Error::Config(format!("midplane axis {axis} is not 0, 1 or 2")));
    }
    let comps = connected_components(m, connectivity);
    if comps.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mid = (m.dims.0[axis] as f64 - 1.0) / 2.0;
    let mut left = BinaryMask::empty(m.dims);
    let mut right = BinaryMask::empty(m.dims);
    for c in &comps {
        let side = if c.centroid(m.dims)[axis] <= mid {
            &mut left
        } else {
            &mut right
        };
        for &i in &c.voxels {
            side.voxels[i] = true;
        }
    }
    Ok((left, right))
}

pub fn split_symmetric(
    lv: &LabelVolume,
    class_id: u32,
    midplane_axis: usize,
    connectivity: Connectivity,
) -> Result<(BinaryMask, BinaryMask)> {
    split_mask(&lv.class_mask(class_id), midplane_axis, connectivity)
}

/// Runs the four steps over every class of one case. Returns the curated
/// label volume (classes renumbered only for new right halves) and one
/// record per output mask.
pub fn curate_labels(case_id: &str, lv: &LabelVolume, cfg: &CurateConfig) -> (LabelVolume, Vec<CurationRecord>) {
    let total = lv.labels.len();
    let mut labels = vec![0u32; total];
    let mut class_map = BTreeMap::new();
    let mut next_id = lv.class_map.keys().max().map_or(1, |m| m + 1);
    let mut records = Vec::new();

    let fraction = |m: &BinaryMask| m.count() as f64 / total as f64;
    let check = |m: &BinaryMask| -> Step {
        if !shape_ok(m, lv.spacing, cfg) {
            Step::Shape
        } else if !background_keep(m.count(), total, cfg.min_foreground_percent) {
            Step::Background
        } else {
            Step::None
        }
    };

    for (&id, name) in &lv.class_map {
        let m = lv.class_mask(id);
        let base = CurationRecord {
            case_id: case_id.to_string(),
            source_class: name.clone(),
            class_name: name.clone(),
            class_id: None,
            step_triggered: Step::None,
            kept: false,
            components_removed: 0,
            symmetric_split: None,
            voxels: m.count(),
            foreground_fraction: fraction(&m),
        };
        let step = check(&m);
        if step != Step::None {
            records.push(CurationRecord {
                step_triggered: step,
                ..base
            });
            continue;
        }
        let (clean, removed) = denoise_components_with(&m, cfg.connectivity, cfg.keep_components);

        let mut outputs = Vec::new();
        if cfg.is_symmetric(name) {
            let (l, r) = split_mask(&clean, cfg.midplane_axis, cfg.connectivity).expect("mask passed the shape filter");
            let names = (format!("left_{name}"), format!("right_{name}"));
            outputs.push((l, names.0.clone(), Some(names.clone()), true));
            outputs.push((r, names.1.clone(), Some(names), false));
        } else {
            outputs.push((clean, name.clone(), None, true));
        }

        for (mask, out_name, split, keeps_id) in outputs {
            let step = check(&mask);
            let mut rec = CurationRecord {
                class_name: out_name.clone(),
                components_removed: removed,
                symmetric_split: split,
                voxels: mask.count(),
                foreground_fraction: fraction(&mask),
                step_triggered: step,
                ..base.clone()
            };
            if step == Step::None {
                let out_id = if keeps_id {
                    id
                } else {
                    next_id += 1;
                    next_id - 1
                };
                for i in mask.foreground() {
                    labels[i] = out_id;
                }
                class_map.insert(out_id, out_name);
                rec.kept = true;
                rec.class_id = Some(out_id);
            }
            records.push(rec);
        }
    }
    let out = LabelVolume {
        dims: lv.dims,
        spacing: lv.spacing,
        origin: lv.origin,
        labels,
        class_map,
    };
    (out, records)
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Curates every case of `manifest`, writing cleaned labels under
/// `out_dir/labels`, plus `out_dir/manifest.json` and
/// `out_dir/curation_report.jsonl`. Unreadable cases are skipped and
/// logged. Cases with no surviving class are left out of the new manifest.
pub fn curate_dataset(
    manifest: &DatasetManifest,
    cfg: &CurateConfig,
    out_dir: &Path,
) -> Result<(DatasetManifest, CurationReport)> {
    let label_dir = out_dir.join("labels");
    std::fs::create_dir_all(&label_dir).map_err(|source| Error::File {
        path: label_dir.clone(),
        source,
    })?;
    let mut report = CurationReport::default();
    let mut entries = Vec::new();
    for entry in &manifest.entries {
        let id = entry.id();
        let loaded = nifti::read_labels(&entry.label_path, &entry.class_map).and_then(|lv| {
            let header = nifti::read_volume(&entry.image_path)?;
            if header.dims != lv.dims {
                return Err(Error::Shape(format!(
                    "image dims {:?} differ from label dims {:?}",
                    header.dims.0, lv.dims.0
                )));
            }
            Ok(lv)
        });
        let lv = match loaded {
            Ok(lv) => lv,
            Err(e) => {
                log::warn!("skipping case {id}: {e}");
                report.skipped.push(SkippedCase {
                    case_id: id,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let (curated, records) = curate_labels(&id, &lv, cfg);
        report.records.extend(records);
        if curated.class_map.is_empty() {
            log::info!("case {id}: no class survived curation");
            continue;
        }
        let rel = PathBuf::from("labels").join(format!("{id}.nii.gz"));
        nifti::write_labels(&out_dir.join(&rel), &curated)?;
        entries.push(ManifestEntry {
            case_id: Some(id),
            image_path: absolute(&entry.image_path),
            label_path: rel,
            class_map: curated.class_map,
            ..entry.clone()
        });
    }
    // Saved with label paths relative to `out_dir`; the returned copy is
    // re-read so its paths resolve from anywhere.
    let manifest_path = out_dir.join("manifest.json");
    DatasetManifest::new(entries).save(&manifest_path)?;
    let curated = DatasetManifest::load(&manifest_path)?;
    report.write_jsonl(&out_dir.join("curation_report.jsonl"))?;
    let kept = report.records.iter().filter(|r| r.kept).count();
    log::info!(
        "curated {} cases: {kept} of {} masks kept, {} cases skipped",
        curated.len(),
        report.records.len(),
        report.skipped.len()
    );
    Ok((curated, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxgrid::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn boxed(d: Dims, lo: [usize; 3], hi: [usize; 3]) -> BinaryMask {
        let mut m = BinaryMask::empty(d);
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    m.set([x, y, z], true);
                }
            }
        }
        m
    }

    #[test]
    fn shape_thresholds() {
        let s = Spacing::iso(1.5);
        let d = Dims::cube(40);
        // 296 and 297 voxel blobs spanning ≥ 10 voxels per axis
        let mut m296 = boxed(d, [0, 0, 0], [10, 10, 2]);
        for i in 0..96 {
            m296.set([i % 10, 10 + i / 10, 0], true);
        }
        assert_eq!(m296.count(), 296);
        assert!(!filter_by_shape(&m296, s));
        let mut m297 = m296.clone();
        m297.set([0, 0, 9], true);
        assert_eq!(m297.count(), 297);
        assert!(filter_by_shape(&m297, s));

        assert!(filter_by_shape(&boxed(d, [0, 0, 0], [12, 10, 10]), s));
        let sheet = boxed(d, [0, 0, 0], [40, 40, 2]);
        assert_eq!(sheet.count(), 3200);
        assert!(!filter_by_shape(&sheet, s));
        assert!(!filter_by_shape(&BinaryMask::empty(d), s));
    }

    #[test]
    fn four_hundred_voxel_blob_is_kept() {
        // 12×10×10 box minus voxels down to 400, extents unchanged
        let d = Dims::cube(16);
        let full = boxed(d, [0, 0, 0], [12, 10, 10]);
        let mut idx: Vec<usize> = full.foreground().collect();
        // keep the two corner voxels that pin the extent
        let keep_a = d.index([0, 0, 0]);
        let keep_b = d.index([11, 9, 9]);
        idx.retain(|&i| i != keep_a && i != keep_b);
        idx.truncate(398);
        let m = BinaryMask::from_indices(d, idx.into_iter().chain([keep_a, keep_b]));
        assert_eq!(m.count(), 400);
        assert_eq!(bounding_extent(&m, Spacing::iso(1.5)).unwrap(), [18.0, 15.0, 15.0]);
        assert!(filter_by_shape(&m, Spacing::iso(1.5)));
    }

    #[test]
    fn background_thresholds() {
        let total = 128usize.pow(3);
        assert!(!background_keep(20_000, total, 1));
        assert!(background_keep(21_000, total, 1));
        assert!(background_keep(100, 10_000, 1));
        assert!(!background_keep(99, 10_000, 1));

        let d = Dims::cube(128);
        let mut labels = vec![0u32; d.len()];
        labels[..20_000].iter_mut().for_each(|l| *l = 1);
        labels[20_000..41_000].iter_mut().for_each(|l| *l = 2);
        let map = BTreeMap::from([(1, "a".to_string()), (2, "b".to_string())]);
        let lv = LabelVolume::new(d, Spacing::iso(1.5), labels, map).unwrap();
        assert_eq!(filter_by_background(&lv), BTreeMap::from([(1, false), (2, true)]));
    }

    #[test]
    fn denoise_cases() {
        let d = Dims::cube(40);
        let sizes = [100, 90, 80, 70, 60, 5, 3];
        let mut m = BinaryMask::empty(d);
        for (k, &n) in sizes.iter().enumerate() {
            let base = [0, 4 * k, 0];
            let mut placed = 0;
            'fill: for z in 0..3 {
                for x in 0..40 {
                    if placed == n {
                        break 'fill;
                    }
                    m.set([base[0] + x, base[1] + (z % 3), base[2]], true);
                    placed += 1;
                }
            }
        }
        let comps = connected_components(&m, Connectivity::TwentySix);
        assert_eq!(comps.iter().map(|c| c.size()).collect::<Vec<_>>(), sizes);
        let (out, removed) = denoise_components_with(&m, Connectivity::TwentySix, 5);
        assert_eq!(removed, 2);
        assert_eq!(out.count(), 400);

        let three = boxed(d, [0, 0, 0], [2, 2, 2])
            .union(&boxed(d, [5, 5, 5], [7, 7, 7]))
            .unwrap()
            .union(&boxed(d, [10, 10, 10], [12, 12, 12]))
            .unwrap();
        assert_eq!(denoise_components(&three), three);
    }

    fn flood_components(m: &BinaryMask) -> Vec<Vec<usize>> {
        fn fill(m: &BinaryMask, seen: &mut [bool], i: usize, out: &mut Vec<usize>) {
            seen[i] = true;
            out.push(i);
            let c = m.dims.coord(i).map(|v| v as i64);
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let q = [c[0] + dx, c[1] + dy, c[2] + dz];
                        if m.dims.contains_signed(q) {
                            let j = m.dims.index(q.map(|v| v as usize));
                            if m.voxels[j] && !seen[j] {
                                fill(m, seen, j, out);
                            }
                        }
                    }
                }
            }
        }
        let mut seen = vec![false; m.voxels.len()];
        let mut out = Vec::new();
        for i in 0..m.voxels.len() {
            if m.voxels[i] && !seen[i] {
                let mut c = Vec::new();
                fill(m, &mut seen, i, &mut c);
                c.sort_unstable();
                out.push(c);
            }
        }
        out
    }

    #[test]
    fn denoise_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = Dims::cube(24);
        for _ in 0..200 {
            let p = rng.gen_range(0.02..0.12);
            let m = BinaryMask {
                dims: d,
                voxels: (0..d.len()).map(|_| rng.gen_bool(p)).collect(),
            };
            let mut comps = flood_components(&m);
            comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
            let expected = BinaryMask::from_indices(d, comps.iter().take(5).flatten().copied());
            let (got, removed) = denoise_components_with(&m, Connectivity::TwentySix, 5);
            assert_eq!(got, expected);
            assert_eq!(removed, comps.len().saturating_sub(5));
            assert!(got.voxels.iter().zip(&m.voxels).all(|(&o, &i)| !o || i));
        }
    }

    #[test]
    fn symmetric_split_cases() {
        let d = Dims::new(128, 16, 16);
        let two = boxed(d, [16, 4, 4], [24, 12, 12])
            .union(&boxed(d, [96, 4, 4], [104, 12, 12]))
            .unwrap();
        let (l, r) = split_mask(&two, 0, Connectivity::TwentySix).unwrap();
        assert_eq!(l, boxed(d, [16, 4, 4], [24, 12, 12]));
        assert_eq!(r, boxed(d, [96, 4, 4], [104, 12, 12]));

        // centroid exactly on the midplane (63.5) goes left
        let mid = boxed(d, [60, 4, 4], [68, 12, 12]);
        let (l, r) = split_mask(&mid, 0, Connectivity::TwentySix).unwrap();
        assert_eq!(l, mid);
        assert!(r.is_empty());
        assert!(matches!(
            split_mask(&BinaryMask::empty(d), 0, Connectivity::TwentySix),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn split_matches_centroid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Dims::new(48, 12, 12);
        for _ in 0..100 {
            let a0 = rng.gen_range(0..20);
            let b0 = rng.gen_range(26..44);
            let wa = rng.gen_range(1..5);
            let wb = rng.gen_range(1..5);
            let a = boxed(d, [a0, 2, 2], [a0 + wa, 6, 6]);
            let b = boxed(d, [b0, 6, 6], [b0 + wb, 10, 10]);
            let m = a.union(&b).unwrap();
            let (l, r) = split_mask(&m, 0, Connectivity::TwentySix).unwrap();
            for blob in [&a, &b] {
                let n = blob.count() as f64;
                let cx = blob.foreground().map(|i| d.coord(i)[0] as f64).sum::<f64>() / n;
                let side = if cx <= 23.5 { &l } else { &r };
                assert!(blob.foreground().all(|i| side.voxels[i]));
            }
            assert_eq!(l.union(&r).unwrap(), m);
            assert!(l.intersection(&r).unwrap().is_empty());
        }
    }

    fn case(d: Dims, classes: &[(u32, &str, BinaryMask)]) -> LabelVolume {
        let mut labels = vec![0u32; d.len()];
        let mut map = BTreeMap::new();
        for (id, name, m) in classes {
            for i in m.foreground() {
                labels[i] = *id;
            }
            map.insert(*id, name.to_string());
        }
        LabelVolume::new(d, Spacing::iso(1.5), labels, map).unwrap()
    }

    #[test]
    fn pipeline_records_and_splits() {
        let d = Dims::new(64, 32, 32);
        let kidneys = boxed(d, [8, 8, 8], [20, 20, 20])
            .union(&boxed(d, [40, 8, 8], [52, 20, 20]))
            .unwrap();
        let tiny = boxed(d, [30, 26, 26], [32, 28, 28]);
        let speck = boxed(d, [60, 0, 0], [61, 1, 1]);
        let liver = boxed(d, [22, 22, 2], [38, 32, 14]).union(&speck).unwrap();
        let lv = case(d, &[(1, "kidney", kidneys), (2, "tiny", tiny), (3, "liver", liver)]);
        let cfg = CurateConfig {
            symmetric_classes: vec!["Kidney".into()],
            ..Default::default()
        };
        let (out, recs) = curate_labels("c1", &lv, &cfg);
        assert_eq!(
            out.class_map,
            BTreeMap::from([
                (1, "left_kidney".to_string()),
                (3, "liver".to_string()),
                (4, "right_kidney".to_string())
            ])
        );
        let tiny_rec = recs.iter().find(|r| r.source_class == "tiny").unwrap();
        assert_eq!((tiny_rec.step_triggered, tiny_rec.kept), (Step::Shape, false));
        let liver_rec = recs.iter().find(|r| r.source_class == "liver").unwrap();
        assert_eq!(liver_rec.components_removed, 0);
        let left = recs.iter().find(|r| r.class_name == "left_kidney").unwrap();
        assert_eq!(
            left.symmetric_split,
            Some(("left_kidney".to_string(), "right_kidney".to_string()))
        );
        assert_eq!(out.class_mask(1), boxed(d, [8, 8, 8], [20, 20, 20]));
        // every dropped mask names one step
        for r in &recs {
            assert_eq!(r.kept, r.step_triggered == Step::None);
        }
    }

    #[test]
    fn pipeline_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = Dims::new(48, 24, 24);
        let cfg = CurateConfig {
            symmetric_classes: vec!["kidney".into()],
            ..Default::default()
        };
        for _ in 0..20 {
            let mut classes = Vec::new();
            for (id, name) in [(1, "kidney"), (2, "liver")] {
                let mut m = BinaryMask::empty(d);
                for _ in 0..rng.gen_range(1..9) {
                    let lo = [rng.gen_range(0..40), rng.gen_range(0..18), rng.gen_range(0..18)];
                    let w = rng.gen_range(1..12);
                    let hi = [(lo[0] + w).min(48), (lo[1] + w).min(24), (lo[2] + w).min(24)];
                    m = m.union(&boxed(d, lo, hi)).unwrap();
                }
                classes.push((id, name, m));
            }
            // later classes overwrite earlier ones where they overlap
            let lv = case(
                d,
                &classes.iter().map(|(a, b, c)| (*a, *b, c.clone())).collect::<Vec<_>>(),
            );
            let (once, _) = curate_labels("c", &lv, &cfg);
            let (twice, recs) = curate_labels("c", &once, &cfg);
            assert_eq!(once, twice);
            assert!(recs.iter().all(|r| r.kept && r.components_removed == 0));
        }
    }

    #[test]
    fn dataset_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dims::new(32, 24, 24);
        let organ = boxed(d, [4, 4, 4], [16, 16, 16]);
        let tiny = boxed(d, [20, 20, 20], [22, 22, 22]);
        let lv = case(d, &[(1, "organ", organ), (2, "tiny", tiny)]);
        let img = crate::voxgrid::Volume::filled(d, Spacing::iso(1.5), 0.0).unwrap();
        nifti::write_volume(&dir.path().join("img.nii.gz"), &img).unwrap();
        nifti::write_labels(&dir.path().join("lab.nii.gz"), &lv).unwrap();
        let entry = ManifestEntry {
            case_id: Some("case0".into()),
            image_path: dir.path().join("img.nii.gz"),
            label_path: dir.path().join("lab.nii.gz"),
            class_map: lv.class_map.clone(),
            modality_tag: "CT".into(),
            anatomy_tag: "abdomen".into(),
            split_tag: Split::Train,
            seen: None,
        };
        let missing = ManifestEntry {
            case_id: Some("gone".into()),
            label_path: dir.path().join("missing.nii.gz"),
            ..entry.clone()
        };
        let m = DatasetManifest::new(vec![entry, missing]);
        let out = dir.path().join("out");
        let (cm, report) = curate_dataset(&m, &CurateConfig::default(), &out).unwrap();
        assert_eq!(cm.len(), 1);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(cm.entries[0].class_map, BTreeMap::from([(1, "organ".to_string())]));
        let reloaded = DatasetManifest::load(&out.join("manifest.json")).unwrap();
        assert_eq!(cm, reloaded);
        let saved = std::fs::read_to_string(out.join("manifest.json")).unwrap();
        assert!(saved.contains("\"labels/case0.nii.gz\""), "{saved}");
        let lab = nifti::read_labels(&reloaded.entries[0].label_path, &reloaded.entries[0].class_map).unwrap();
        assert_eq!(lab.class_mask(1), boxed(d, [4, 4, 4], [16, 16, 16]));
        let rep = CurationReport::read_jsonl(&out.join("curation_report.jsonl")).unwrap();
        assert_eq!(rep.records, report.records);
    }
}
