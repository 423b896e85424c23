//! Voxel grids, masks, prompts and the geometry shared by every stage.
//!
//! Storage order is x fastest, then y, then z: the voxel `(i, j, k)` lives
//! at linear index `i + nx * (j + ny * k)`. Volumes are brought into a
//! canonical RAS frame at ingestion, so axis 0 increases toward the
//! subject's right, axis 1 toward anterior and axis 2 toward superior.

mod components;
mod metrics;
mod resample;

pub use components::{connected_components, Component, Connectivity};
pub use metrics::{bounding_box, bounding_extent, dice, physical_volume};
pub use resample::{resample_labels, resample_mask, resample_volume};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Voxel counts along x, y and z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims([nx, ny, nz])
    }

    pub fn cube(n: usize) -> Self {
        Dims([n, n, n])
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, c: [usize; 3]) -> usize {
        c[0] + self.0[0] * (c[1] + self.0[1] * c[2])
    }

    #[inline]
    pub fn coord(&self, lin: usize) -> [usize; 3] {
        let [nx, ny, _] = self.0;
        [lin % nx, (lin / nx) % ny, lin / (nx * ny)]
    }

    pub fn contains(&self, c: [usize; 3]) -> bool {
        c.iter().zip(self.0.iter()).all(|(&v, &n)| v < n)
    }

    /// Signed containment check, for coordinates expressed in a shifted frame.
    pub fn contains_signed(&self, c: [i64; 3]) -> bool {
        c.iter().zip(self.0.iter()).all(|(&v, &n)| v >= 0 && (v as usize) < n)
    }

    fn validate(&self) -> Result<()> {
        if self.0.contains(&0) {
            return Err(shape_err(format!("dims must be >= 1, got {:?}", self.0)));
        }
        Ok(())
    }
}

/// Physical voxel size in millimetres along x, y and z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub fn iso(mm: f64) -> Self {
        Spacing([mm; 3])
    }

    pub fn voxel_volume(&self) -> f64 {
        self.0[0] * self.0[1] * self.0[2]
    }

    fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("spacing must be positive, got {:?}", self.0)));
        }
        Ok(())
    }
}

/// Axis-order marker recorded at ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Orientation {
    #[default]
    Ras,
}

/// Scalar intensity volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub spacing: Spacing,
    /// World position (mm) of voxel (0, 0, 0).
    pub origin: [f64; 3],
    pub orientation: Orientation,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        spacing.validate()?;
        if data.len() != dims.len() {
            return Err(shape_err(format!(
                "intensity buffer has {} values, dims {:?} need {}",
                data.len(),
                dims.0,
                dims.len()
            )));
        }
        Ok(Volume {
            dims,
            spacing,
            origin: [0.0; 3],
            orientation: Orientation::Ras,
            data,
        })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f32) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims.len()])
    }

    #[inline]
    pub fn get(&self, c: [usize; 3]) -> f32 {
        self.data[self.dims.index(c)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Single-class boolean grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub dims: Dims,
    pub voxels: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(dims: Dims) -> Self {
        BinaryMask {
            dims,
            voxels: vec![false; dims.len()],
        }
    }

    pub fn full(dims: Dims) -> Self {
        BinaryMask {
            dims,
            voxels: vec![true; dims.len()],
        }
    }

    pub fn from_voxels(dims: Dims, voxels: Vec<bool>) -> Result<Self> {
        if voxels.len() != dims.len() {
            return Err(shape_err(format!(
                "mask buffer has {} voxels, dims {:?} need {}",
                voxels.len(),
                dims.0,
                dims.len()
            )));
        }
        Ok(BinaryMask { dims, voxels })
    }

    pub fn from_indices(dims: Dims, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut m = Self::empty(dims);
        for i in indices {
            m.voxels[i] = true;
        }
        m
    }

    #[inline]
    pub fn get(&self, c: [usize; 3]) -> bool {
        self.voxels[self.dims.index(c)]
    }

    #[inline]
    pub fn set(&mut self, c: [usize; 3], v: bool) {
        let i = self.dims.index(c);
        self.voxels[i] = v;
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.voxels.iter().any(|&v| v)
    }

    pub fn foreground(&self) -> impl Iterator<Item = usize> + '_ {
        self.voxels.iter().enumerate().filter_map(|(i, &v)| v.then_some(i))
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && b)
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask> {
        if self.dims != other.dims {
            return Err(shape_err(format!("mask dims {:?} vs {:?}", self.dims.0, other.dims.0)));
        }
        let voxels = self.voxels.iter().zip(&other.voxels).map(|(&a, &b)| f(a, b)).collect();
        Ok(BinaryMask {
            dims: self.dims,
            voxels,
        })
    }

    /// Run-length encoding in linear voxel order. Runs alternate
    /// background/foreground and always start with a (possibly empty)
    /// background run.
    pub fn to_rle(&self) -> Vec<u64> {
        encode_rle(&self.voxels)
    }

    pub fn from_rle(dims: Dims, rle: &[u64]) -> Result<Self> {
        let voxels = decode_rle(rle, dims.len())?;
        Ok(BinaryMask { dims, voxels })
    }
}

pub fn encode_rle(bits: &[bool]) -> Vec<u64> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u64;
    for &b in bits {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn decode_rle(rle: &[u64], total: usize) -> Result<Vec<bool>> {
    let sum: u64 = rle.iter().sum();
    if sum != total as u64 {
        return Err(shape_err(format!("run lengths sum to {sum}, expected {total}")));
    }
    let mut out = Vec::with_capacity(total);
    for (i, &run) in rle.iter().enumerate() {
        out.extend(std::iter::repeat_n(i % 2 == 1, run as usize));
    }
    Ok(out)
}

/// Integer class grid; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: Dims,
    pub spacing: Spacing,
    pub origin: [f64; 3],
    pub labels: Vec<u32>,
    pub class_map: BTreeMap<u32, String>,
}

impl LabelVolume {
    pub fn new(dims: Dims, spacing: Spacing, labels: Vec<u32>, class_map: BTreeMap<u32, String>) -> Result<Self> {
        dims.validate()?;
        spacing.validate()?;
        if labels.len() != dims.len() {
            return Err(shape_err(format!(
                "label buffer has {} values, dims {:?} need {}",
                labels.len(),
                dims.0,
                dims.len()
            )));
        }
        if let Some(missing) = labels.iter().find(|&&l| l != 0 && !class_map.contains_key(&l)) {
            return Err(Error::Config(format!("label {missing} has no entry in the class map")));
        }
        Ok(LabelVolume {
            dims,
            spacing,
            origin: [0.0; 3],
            labels,
            class_map,
        })
    }

    /// One-hot mask of a single class.
    pub fn class_mask(&self, class_id: u32) -> BinaryMask {
        BinaryMask {
            dims: self.dims,
            voxels: self.labels.iter().map(|&l| l == class_id).collect(),
        }
    }

    pub fn foreground(&self) -> BinaryMask {
        BinaryMask {
            dims: self.dims,
            voxels: self.labels.iter().map(|&l| l != 0).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClickLabel {
    Positive,
    Negative,
}

impl ClickLabel {
    pub fn symbol(&self) -> char {
        match self {
            ClickLabel::Positive => '+',
            ClickLabel::Negative => '-',
        }
    }
}

/// A voxel coordinate with a foreground/background label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointPrompt {
    pub coord: [usize; 3],
    pub label: ClickLabel,
}

impl PointPrompt {
    pub fn positive(coord: [usize; 3]) -> Self {
        PointPrompt {
            coord,
            label: ClickLabel::Positive,
        }
    }

    pub fn negative(coord: [usize; 3]) -> Self {
        PointPrompt {
            coord,
            label: ClickLabel::Negative,
        }
    }
}

impl std::str::FromStr for PointPrompt {
    type Err = Error;

    /// Parses `i,j,k,+` or `i,j,k,-`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || Error::Config(format!("click must look like i,j,k,+ or i,j,k,-, got {s:?}"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let mut coord = [0usize; 3];
        for (c, p) in coord.iter_mut().zip(&parts[..3]) {
            *c = p.parse().map_err(|_| bad())?;
        }
        let label = match parts[3] {
            "+" | "pos" | "positive" | "1" => ClickLabel::Positive,
            "-" | "neg" | "negative" | "0" => ClickLabel::Negative,
            _ => return Err(bad()),
        };
        Ok(PointPrompt { coord, label })
    }
}

/// Inclusive voxel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_corner: [usize; 3],
    pub max_corner: [usize; 3],
}

impl BoundingBox {
    pub fn extent_voxels(&self) -> [usize; 3] {
        let mut e = [0; 3];
        for a in 0..3 {
            e[a] = self.max_corner[a] - self.min_corner[a] + 1;
        }
        e
    }

    pub fn contains(&self, c: [usize; 3]) -> bool {
        (0..3).all(|a| c[a] >= self.min_corner[a] && c[a] <= self.max_corner[a])
    }
}
