use super::{BinaryMask, BoundingBox, Spacing};
use crate::error::{shape_err, Error, Result};

/// Dice overlap `2|a ∩ b| / (|a| + |b|)`. Two empty masks score 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.dims != b.dims {
        return Err(shape_err(format!("dice on dims {:?} vs {:?}", a.dims.0, b.dims.0)));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.voxels.iter().zip(&b.voxels) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Foreground volume in mm³.
pub fn physical_volume(m: &BinaryMask, spacing: Spacing) -> f64 {
    m.count() as f64 * spacing.voxel_volume()
}

pub fn bounding_box(m: &BinaryMask) -> Option<BoundingBox> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for i in m.foreground() {
        let c = m.dims.coord(i);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
        any = true;
    }
    any.then_some(BoundingBox {
        min_corner: lo,
        max_corner: hi,
    })
}

/// Per-axis physical extent `(max - min + 1) * spacing` of the foreground.
pub fn bounding_extent(m: &BinaryMask, spacing: Spacing) -> Result<[f64; 3]> {
    let bb = bounding_box(m).ok_or(Error::EmptyMask)?;
    let e = bb.extent_voxels();
    Ok([
        e[0] as f64 * spacing.0[0],
        e[1] as f64 * spacing.0[1],
        e[2] as f64 * spacing.0[2],
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxgrid::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(rng: &mut ChaCha8Rng, dims: Dims, p: f64) -> BinaryMask {
        let voxels = (0..dims.len()).map(|_| rng.gen_bool(p)).collect();
        BinaryMask { dims, voxels }
    }

    #[test]
    fn dice_trivial_cases() {
        let d = Dims::cube(4);
        let mut a = BinaryMask::empty(d);
        for i in 0..8 {
            a.voxels[i] = true;
        }
        assert_eq!(dice(&a, &a).unwrap(), 1.0);

        let mut disjoint = BinaryMask::empty(d);
        for i in 8..16 {
            disjoint.voxels[i] = true;
        }
        assert_eq!(dice(&a, &disjoint).unwrap(), 0.0);

        let mut half = BinaryMask::empty(d);
        for i in 4..12 {
            half.voxels[i] = true;
        }
        assert_eq!(dice(&a, &half).unwrap(), 0.5);

        let e = BinaryMask::empty(d);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert!(dice(&e, &BinaryMask::empty(Dims::cube(3))).is_err());
    }

    #[test]
    fn dice_matches_brute_force_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = Dims::cube(16);
        for _ in 0..100 {
            let p = rng.gen_range(0.0..0.6);
            let a = random_mask(&mut rng, d, p);
            let b = random_mask(&mut rng, d, p);
            let (mut inter, mut na, mut nb) = (0.0, 0.0, 0.0);
            for z in 0..16 {
                for y in 0..16 {
                    for x in 0..16 {
                        let (va, vb) = (a.get([x, y, z]), b.get([x, y, z]));
                        if va {
                            na += 1.0;
                        }
                        if vb {
                            nb += 1.0;
                        }
                        if va && vb {
                            inter += 1.0;
                        }
                    }
                }
            }
            let expected = if na + nb == 0.0 { 1.0 } else { 2.0 * inter / (na + nb) };
            assert_eq!(dice(&a, &b).unwrap(), expected);
            assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        }
    }

    #[test]
    fn physical_volume_thresholds() {
        let d = Dims::cube(16);
        let s = Spacing::iso(1.5);
        let m296 = BinaryMask::from_indices(d, 0..296);
        let m297 = BinaryMask::from_indices(d, 0..297);
        assert_eq!(physical_volume(&m296, s), 999.0);
        assert_eq!(physical_volume(&m297, s), 1002.375);
        assert_eq!(physical_volume(&BinaryMask::empty(d), s), 0.0);
        // cubic in isotropic spacing
        assert_eq!(physical_volume(&m296, Spacing::iso(3.0)), 8.0 * 999.0);
    }

    #[test]
    fn extent_cases() {
        let d = Dims::new(20, 4, 4);
        let s = Spacing::iso(1.5);
        let run = BinaryMask::from_indices(d, (3..13).map(|x| d.index([x, 1, 1])));
        assert_eq!(bounding_extent(&run, s).unwrap(), [15.0, 1.5, 1.5]);
        let single = BinaryMask::from_indices(d, [d.index([5, 2, 3])]);
        assert_eq!(bounding_extent(&single, s).unwrap(), [1.5, 1.5, 1.5]);
        assert!(matches!(
            bounding_extent(&BinaryMask::empty(d), s),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn extent_matches_index_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = Dims::cube(16);
        let s = Spacing([0.5, 1.0, 2.5]);
        for _ in 0..50 {
            let p = rng.gen_range(0.001..0.05);
            let m = random_mask(&mut rng, d, p);
            if m.is_empty() {
                continue;
            }
            let mut lo = [16usize; 3];
            let mut hi = [0usize; 3];
            for z in 0..16 {
                for y in 0..16 {
                    for x in 0..16 {
                        if m.get([x, y, z]) {
                            for (a, v) in [x, y, z].into_iter().enumerate() {
                                lo[a] = lo[a].min(v);
                                hi[a] = hi[a].max(v);
                            }
                        }
                    }
                }
            }
            let got = bounding_extent(&m, s).unwrap();
            for a in 0..3 {
                assert_eq!(got[a], (hi[a] - lo[a] + 1) as f64 * s.0[a]);
            }
        }
    }
}
