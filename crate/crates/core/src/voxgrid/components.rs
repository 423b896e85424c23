use serde::{Deserialize, Serialize};

use super::{BinaryMask, Dims};

/// Voxel neighbourhood used for connectivity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbours only.
    Six,
    /// Face, edge and corner neighbours.
    #[default]
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Option<Self> {
        match n {
            6 => Some(Connectivity::Six),
            26 => Some(Connectivity::TwentySix),
            _ => None,
        }
    }

    pub fn count(&self) -> u32 {
        match self {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }

    pub(crate) fn offsets(&self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// One connected component, as sorted linear voxel indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub voxels: Vec<usize>,
}

impl Component {
    pub fn size(&self) -> usize {
        self.voxels.len()
    }

    /// Smallest linear index; used as the deterministic tie-breaker.
    pub fn first_voxel(&self) -> usize {
        self.voxels[0]
    }

    pub fn to_mask(&self, dims: Dims) -> BinaryMask {
        BinaryMask::from_indices(dims, self.voxels.iter().copied())
    }

    /// Mean voxel coordinate.
    pub fn centroid(&self, dims: Dims) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        for &i in &self.voxels {
            let c = dims.coord(i);
            for a in 0..3 {
                acc[a] += c[a] as f64;
            }
        }
        let n = self.voxels.len() as f64;
        acc.map(|v| v / n)
    }
}

/// Labels the foreground into connected components, largest first.
///
/// Equal-sized components are ordered by their smallest linear voxel index.
pub fn connected_components(m: &BinaryMask, connectivity: Connectivity) -> Vec<Component> {
    let dims = m.dims;
    let [nx, ny, nz] = dims.0.map(|n| n as i64);
    let offsets = connectivity.offsets();
    let mut seen = vec![false; dims.len()];
    let mut stack = Vec::new();
    let mut comps = Vec::new();

    for start in 0..dims.len() {
        if !m.voxels[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut voxels = Vec::new();
        while let Some(cur) = stack.pop() {
            voxels.push(cur);
            let c = dims.coord(cur);
            let (x, y, z) = (c[0] as i64, c[1] as i64, c[2] as i64);
            for o in &offsets {
                let (qx, qy, qz) = (x + o[0], y + o[1], z + o[2]);
                if qx < 0 || qy < 0 || qz < 0 || qx >= nx || qy >= ny || qz >= nz {
                    continue;
                }
                let q = (qx + nx * (qy + ny * qz)) as usize;
                if m.voxels[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        voxels.sort_unstable();
        comps.push(Component { voxels });
    }
    // Discovery order is ascending first voxel, so a stable sort keeps ties deterministic.
    comps.sort_by_key(|c| std::cmp::Reverse(c.size()));
    comps
}
