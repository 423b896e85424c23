//! Axis-aligned resampling to a target spacing.
//!
//! Output voxel `o` along an axis samples the input at continuous index
//! `(o + 0.5) * target / source - 0.5`, clamped to the input range.

use super::{BinaryMask, Dims, LabelVolume, Spacing, Volume};
use crate::error::{Error, Result};

fn target_dims(dims: Dims, from: Spacing, to: Spacing) -> Result<Dims> {
    if to.0.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::Config(format!(
            "target spacing must be positive, got {:?}",
            to.0
        )));
    }
    let mut out = [0usize; 3];
    for a in 0..3 {
        let n = (dims.0[a] as f64 * from.0[a] / to.0[a]).round() as usize;
        out[a] = n.max(1);
    }
    Ok(Dims(out))
}

fn source_position(o: usize, ratio: f64, n_in: usize) -> f64 {
    ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64)
}

/// Per-axis nearest-neighbour lookup tables.
fn nearest_tables(din: Dims, dout: Dims, from: Spacing, to: Spacing) -> [Vec<usize>; 3] {
    std::array::from_fn(|a| {
        let ratio = to.0[a] / from.0[a];
        (0..dout.0[a])
            .map(|o| (source_position(o, ratio, din.0[a]).round() as usize).min(din.0[a] - 1))
            .collect()
    })
}

/// Trilinear resampling of intensities.
pub fn resample_volume(v: &Volume, target: Spacing) -> Result<Volume> {
    let dout = target_dims(v.dims, v.spacing, target)?;
    if v.spacing == target {
        return Ok(v.clone());
    }
    let din = v.dims;
    // (lower index, upper index, fraction) per axis
    let tables: [Vec<(usize, usize, f32)>; 3] = std::array::from_fn(|a| {
        let ratio = target.0[a] / v.spacing.0[a];
        (0..dout.0[a])
            .map(|o| {
                let p = source_position(o, ratio, din.0[a]);
                let lo = p.floor() as usize;
                let hi = (lo + 1).min(din.0[a] - 1);
                (lo, hi, (p - lo as f64) as f32)
            })
            .collect()
    });
    let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
    let mut data = Vec::with_capacity(dout.len());
    for &(z0, z1, tz) in &tables[2] {
        for &(y0, y1, ty) in &tables[1] {
            for &(x0, x1, tx) in &tables[0] {
                let g = |x, y, z| v.data[din.index([x, y, z])];
                let c00 = lerp(g(x0, y0, z0), g(x1, y0, z0), tx);
                let c10 = lerp(g(x0, y1, z0), g(x1, y1, z0), tx);
                let c01 = lerp(g(x0, y0, z1), g(x1, y0, z1), tx);
                let c11 = lerp(g(x0, y1, z1), g(x1, y1, z1), tx);
                data.push(lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz));
            }
        }
    }
    let mut out = Volume::new(dout, target, data)?;
    out.origin = v.origin;
    out.orientation = v.orientation;
    Ok(out)
}

fn resample_nearest<T: Copy>(values: &[T], din: Dims, from: Spacing, to: Spacing) -> Result<(Dims, Vec<T>)> {
    let dout = target_dims(din, from, to)?;
    if from == to {
        return Ok((din, values.to_vec()));
    }
    let [tx, ty, tz] = nearest_tables(din, dout, from, to);
    let mut out = Vec::with_capacity(dout.len());
    for &z in &tz {
        for &y in &ty {
            for &x in &tx {
                out.push(values[din.index([x, y, z])]);
            }
        }
    }
    Ok((dout, out))
}

/// Nearest-neighbour resampling of a mask recorded at spacing `from`.
pub fn resample_mask(m: &BinaryMask, from: Spacing, to: Spacing) -> Result<BinaryMask> {
    let (dims, voxels) = resample_nearest(&m.voxels, m.dims, from, to)?;
    Ok(BinaryMask { dims, voxels })
}

/// Nearest-neighbour resampling of a label volume.
pub fn resample_labels(lv: &LabelVolume, to: Spacing) -> Result<LabelVolume> {
    let (dims, labels) = resample_nearest(&lv.labels, lv.dims, lv.spacing, to)?;
    let mut out = LabelVolume::new(dims, to, labels, lv.class_map.clone())?;
    out.origin = lv.origin;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn doubling_resolution() {
        let v = Volume::filled(Dims::cube(64), Spacing::iso(3.0), 2.5).unwrap();
        let r = resample_volume(&v, Spacing::iso(1.5)).unwrap();
        assert_eq!(r.dims, Dims::cube(128));
        assert!(r.data.iter().all(|&x| x == 2.5));
        let back = resample_volume(&r, Spacing::iso(3.0)).unwrap();
        assert_eq!(back.dims, Dims::cube(64));
    }

    #[test]
    fn identity_is_bit_identical() {
        let data: Vec<f32> = (0..27).map(|i| (i as f32).sin()).collect();
        let v = Volume::new(Dims::cube(3), Spacing::iso(1.5), data).unwrap();
        assert_eq!(resample_volume(&v, Spacing::iso(1.5)).unwrap(), v);
    }

    #[test]
    fn linear_ramp_is_interpolated() {
        let data: Vec<f32> = (0..4).map(|i| i as f32).collect();
        let v = Volume::new(Dims::new(4, 1, 1), Spacing([2.0, 1.0, 1.0]), data).unwrap();
        let r = resample_volume(&v, Spacing([1.0, 1.0, 1.0])).unwrap();
        assert_eq!(r.dims, Dims::new(8, 1, 1));
        // interior samples sit at (o + 0.5) / 2 - 0.5
        assert_eq!(r.data[2], 0.75);
        assert_eq!(r.data[0], 0.0);
        assert_eq!(r.data[7], 3.0);
    }

    #[test]
    fn labels_stay_discrete() {
        let mut map = BTreeMap::new();
        map.insert(1, "a".into());
        map.insert(7, "b".into());
        let labels: Vec<u32> = (0..64).map(|i| [0, 1, 7][i % 3]).collect();
        let lv = LabelVolume::new(Dims::cube(4), Spacing::iso(1.0), labels, map).unwrap();
        let r = resample_labels(&lv, Spacing::iso(0.6)).unwrap();
        assert_eq!(r.dims, Dims::cube(7));
        assert!(r.labels.iter().all(|l| [0, 1, 7].contains(l)));
        let m = lv.class_mask(7);
        let rm = resample_mask(&m, lv.spacing, Spacing::iso(0.5)).unwrap();
        assert_eq!(rm.dims, Dims::cube(8));
        let back = resample_mask(&rm, Spacing::iso(0.5), Spacing::iso(1.0)).unwrap();
        assert_eq!(back.dims, m.dims);
    }

    #[test]
    fn tiny_axis_keeps_one_voxel() {
        let v = Volume::filled(Dims::new(1, 4, 4), Spacing::iso(1.0), 1.0).unwrap();
        let r = resample_volume(&v, Spacing::iso(5.0)).unwrap();
        assert_eq!(r.dims, Dims::new(1, 1, 1));
        assert!(resample_volume(&v, Spacing([1.0, -1.0, 1.0])).is_err());
    }
}
