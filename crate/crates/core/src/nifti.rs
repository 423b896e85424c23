//! Minimal NIfTI-1 single-file reader and writer (`.nii` / `.nii.gz`).
//!
//! On read the voxel-to-world affine is reduced to an axis permutation plus
//! flips, and the array is reoriented so that voxel axes run along R, A
//! and S. Per-axis spacing is the column norm of the affine. Oblique
//! components are discarded. On write the canonical diagonal affine is
//! stored in both the qform and the sform.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::voxgrid::{BinaryMask, Dims, LabelVolume, Spacing, Volume};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    U8,
    I8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl DataType {
    fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => DataType::U8,
            4 => DataType::I16,
            8 => DataType::I32,
            16 => DataType::F32,
            64 => DataType::F64,
            256 => DataType::I8,
            512 => DataType::U16,
            768 => DataType::U32,
            other => return Err(nerr(format!("unsupported datatype code {other}"))),
        })
    }

    fn code(&self) -> i16 {
        match self {
            DataType::U8 => 2,
            DataType::I16 => 4,
            DataType::I32 => 8,
            DataType::F32 => 16,
            DataType::F64 => 64,
            DataType::I8 => 256,
            DataType::U16 => 512,
            DataType::U32 => 768,
        }
    }

    fn bytes(&self) -> usize {
        match self {
            DataType::U8 | DataType::I8 => 1,
            DataType::I16 | DataType::U16 => 2,
            DataType::I32 | DataType::U32 | DataType::F32 => 4,
            DataType::F64 => 8,
        }
    }
}

fn nerr(msg: impl Into<String>) -> Error {
    Error::Nifti(msg.into())
}

/// Raw decoded image in the canonical frame, values as f64.
#[derive(Debug, Clone)]
pub struct NiftiImage {
    pub dims: Dims,
    pub spacing: Spacing,
    pub origin: [f64; 3],
    pub values: Vec<f64>,
}

struct Reader<'a> {
    buf: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.buf[at..at + N]);
        if self.big_endian {
            b.reverse();
        }
        b
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.bytes(at))
    }
    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.bytes(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.bytes(at))
    }
    fn value(&self, dt: DataType, at: usize) -> f64 {
        match dt {
            DataType::U8 => self.buf[at] as f64,
            DataType::I8 => self.buf[at] as i8 as f64,
            DataType::I16 => self.i16(at) as f64,
            DataType::U16 => u16::from_le_bytes(self.bytes(at)) as f64,
            DataType::I32 => self.i32(at) as f64,
            DataType::U32 => u32::from_le_bytes(self.bytes(at)) as f64,
            DataType::F32 => self.f32(at) as f64,
            DataType::F64 => f64::from_le_bytes(self.bytes(at)),
        }
    }
}

fn maybe_gunzip(raw: &[u8]) -> Result<Vec<u8>> {
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        MultiGzDecoder::new(raw)
            .read_to_end(&mut out)
            .map_err(|e| nerr(format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw.to_vec())
    }
}

fn quaternion_rotation(b: f64, c: f64, d: f64) -> [[f64; 3]; 3] {
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    [
        [
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
        ],
        [
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
        ],
        [
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - c * c - b * b,
        ],
    ]
}

/// Parses a NIfTI-1 byte stream, gzip-compressed or raw.
pub fn decode(raw: &[u8]) -> Result<NiftiImage> {
    let buf = maybe_gunzip(raw)?;
    if buf.len() < HEADER_SIZE {
        return Err(nerr(format!("file is {} bytes, shorter than a header", buf.len())));
    }
    let le = i32::from_le_bytes(buf[0..4].try_into().unwrap());
    let big_endian = match le {
        348 => false,
        _ if i32::from_be_bytes(buf[0..4].try_into().unwrap()) == 348 => true,
        _ => return Err(nerr("sizeof_hdr is not 348")),
    };
    let r = Reader { buf: &buf, big_endian };
    let magic = &buf[344..348];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(nerr("missing n+1 magic"));
    }
    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(nerr(format!("dim[0] = {ndim} out of range")));
    }
    let mut shape = [1usize; 3];
    for a in 0..(ndim as usize).min(3) {
        let n = r.i16(42 + 2 * a);
        if n < 1 {
            return Err(nerr(format!("dim[{}] = {n}", a + 1)));
        }
        shape[a] = n as usize;
    }
    for a in 3..(ndim as usize) {
        if r.i16(42 + 2 * a) > 1 {
            return Err(nerr("only single-frame 3D images are supported"));
        }
    }
    let dt = DataType::from_code(r.i16(70))?;
    let pixdim: [f64; 3] = std::array::from_fn(|a| (r.f32(80 + 4 * a) as f64).abs());
    let vox_offset = r.f32(108) as usize;
    let mut slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let qform_code = r.i16(252);
    let sform_code = r.i16(254);

    let affine: ([[f64; 3]; 3], [f64; 3]) = if sform_code > 0 {
        let row = |at: usize| -> [f64; 4] { std::array::from_fn(|i| r.f32(at + 4 * i) as f64) };
        let rows = [row(280), row(296), row(312)];
        (
            std::array::from_fn(|i| [rows[i][0], rows[i][1], rows[i][2]]),
            [rows[0][3], rows[1][3], rows[2][3]],
        )
    } else if qform_code > 0 {
        let (b, c, d) = (r.f32(256) as f64, r.f32(260) as f64, r.f32(264) as f64);
        let qfac = if r.f32(76) < 0.0 { -1.0 } else { 1.0 };
        let rot = quaternion_rotation(b, c, d);
        let scale = [pixdim[0], pixdim[1], pixdim[2] * qfac];
        (
            std::array::from_fn(|i| std::array::from_fn(|j| rot[i][j] * scale[j])),
            [r.f32(268) as f64, r.f32(272) as f64, r.f32(276) as f64],
        )
    } else {
        let p = pixdim.map(|v| if v > 0.0 { v } else { 1.0 });
        ([[p[0], 0.0, 0.0], [0.0, p[1], 0.0], [0.0, 0.0, p[2]]], [0.0; 3])
    };

    let n: usize = shape.iter().product();
    let need = vox_offset + n * dt.bytes();
    if buf.len() < need {
        return Err(nerr(format!(
            "truncated data: {} bytes present, {} needed",
            buf.len(),
            need
        )));
    }
    let raw_values: Vec<f64> = (0..n)
        .map(|i| r.value(dt, vox_offset + i * dt.bytes()) * slope + inter)
        .collect();

    // voxel axis j -> (world axis, flipped?)
    let (m, t) = affine;
    let mut world_of = [0usize; 3];
    let mut flip = [false; 3];
    let mut used = [false; 3];
    let mut spacing = [1.0f64; 3];
    for j in 0..3 {
        let col = [m[0][j], m[1][j], m[2][j]];
        let norm = (col[0] * col[0] + col[1] * col[1] + col[2] * col[2]).sqrt();
        // header floats are f32; snap to micrometres so 0.8 reads back as 0.8
        spacing[j] = if norm > 0.0 { (norm * 1e6).round() / 1e6 } else { 1.0 };
        let mut best = None;
        for w in 0..3 {
            if used[w] {
                continue;
            }
            if best.is_none_or(|b: usize| col[w].abs() > col[b].abs()) {
                best = Some(w);
            }
        }
        let w = best.unwrap();
        used[w] = true;
        world_of[j] = w;
        flip[j] = col[w] < 0.0;
    }
    let mut out_shape = [0usize; 3];
    let mut out_spacing = [0f64; 3];
    for j in 0..3 {
        out_shape[world_of[j]] = shape[j];
        out_spacing[world_of[j]] = spacing[j];
    }
    let din = Dims(shape);
    let dout = Dims(out_shape);
    let mut values = vec![0.0; n];
    for (lin, &v) in raw_values.iter().enumerate() {
        let c = din.coord(lin);
        let mut oc = [0usize; 3];
        for j in 0..3 {
            oc[world_of[j]] = if flip[j] { shape[j] - 1 - c[j] } else { c[j] };
        }
        values[dout.index(oc)] = v;
    }
    // world position of the canonical (0,0,0) voxel
    let mut corner = [0f64; 3];
    for j in 0..3 {
        corner[j] = if flip[j] { (shape[j] - 1) as f64 } else { 0.0 };
    }
    let origin: [f64; 3] = std::array::from_fn(|i| t[i] + (0..3).map(|j| m[i][j] * corner[j]).sum::<f64>());

    Ok(NiftiImage {
        dims: dout,
        spacing: Spacing(out_spacing),
        origin,
        values,
    })
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn decode_volume(raw: &[u8]) -> Result<Volume> {
    let img = decode(raw)?;
    let mut v = Volume::new(img.dims, img.spacing, img.values.iter().map(|&x| x as f32).collect())?;
    v.origin = img.origin;
    Ok(v)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(&read_bytes(path)?)
}

/// Decodes integer labels. Class names default to `class_<id>` for ids
/// missing from `class_map`.
pub fn decode_labels(raw: &[u8], class_map: &BTreeMap<u32, String>) -> Result<LabelVolume> {
    let img = decode(raw)?;
    let mut labels = Vec::with_capacity(img.values.len());
    let mut map = class_map.clone();
    for &v in &img.values {
        if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(nerr(format!("label value {v} is not a non-negative integer")));
        }
        let l = v as u32;
        if l != 0 {
            map.entry(l).or_insert_with(|| format!("class_{l}"));
        }
        labels.push(l);
    }
    let mut lv = LabelVolume::new(img.dims, img.spacing, labels, map)?;
    lv.origin = img.origin;
    Ok(lv)
}

pub fn read_labels(path: &Path, class_map: &BTreeMap<u32, String>) -> Result<LabelVolume> {
    decode_labels(&read_bytes(path)?, class_map)
}

fn encode_raw(
    dims: Dims,
    spacing: Spacing,
    origin: [f64; 3],
    dt: DataType,
    write_values: impl FnOnce(&mut Vec<u8>),
) -> Vec<u8> {
    let mut h = vec![0u8; DATA_OFFSET];
    let put_i16 = |h: &mut Vec<u8>, at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut Vec<u8>, at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    put_i16(&mut h, 40, 3);
    for a in 0..3 {
        put_i16(&mut h, 42 + 2 * a, dims.0[a] as i16);
    }
    for a in 3..7 {
        put_i16(&mut h, 42 + 2 * a, 1);
    }
    put_i16(&mut h, 70, dt.code());
    put_i16(&mut h, 72, (dt.bytes() * 8) as i16);
    put_f32(&mut h, 76, 1.0);
    for a in 0..3 {
        put_f32(&mut h, 80 + 4 * a, spacing.0[a] as f32);
    }
    put_f32(&mut h, 108, DATA_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2; // mm
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    for a in 0..3 {
        put_f32(&mut h, 268 + 4 * a, origin[a] as f32);
    }
    for i in 0..3 {
        put_f32(&mut h, 280 + 16 * i + 4 * i, spacing.0[i] as f32);
        put_f32(&mut h, 280 + 16 * i + 12, origin[i] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    write_values(&mut h);
    h
}

fn finish(raw: Vec<u8>, gzip: bool) -> Vec<u8> {
    if !gzip {
        return raw;
    }
    let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
    enc.write_all(&raw).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail")
}

pub fn encode_volume(v: &Volume, gzip: bool) -> Vec<u8> {
    let raw = encode_raw(v.dims, v.spacing, v.origin, DataType::F32, |buf| {
        for x in &v.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    });
    finish(raw, gzip)
}

pub fn encode_labels(lv: &LabelVolume, gzip: bool) -> Vec<u8> {
    let max = lv.labels.iter().copied().max().unwrap_or(0);
    let dt = if max <= u8::MAX as u32 {
        DataType::U8
    } else {
        DataType::U32
    };
    let raw = encode_raw(lv.dims, lv.spacing, lv.origin, dt, |buf| {
        for &l in &lv.labels {
            match dt {
                DataType::U8 => buf.push(l as u8),
                _ => buf.extend_from_slice(&l.to_le_bytes()),
            }
        }
    });
    finish(raw, gzip)
}

pub fn encode_mask(m: &BinaryMask, spacing: Spacing, origin: [f64; 3], gzip: bool) -> Vec<u8> {
    let raw = encode_raw(m.dims, spacing, origin, DataType::U8, |buf| {
        buf.extend(m.voxels.iter().map(|&b| b as u8));
    });
    finish(raw, gzip)
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write_file(path, &encode_volume(v, is_gz(path)))
}

pub fn write_labels(path: &Path, lv: &LabelVolume) -> Result<()> {
    write_file(path, &encode_labels(lv, is_gz(path)))
}

pub fn write_mask(path: &Path, m: &BinaryMask, spacing: Spacing, origin: [f64; 3]) -> Result<()> {
    write_file(path, &encode_mask(m, spacing, origin, is_gz(path)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_volume() -> Volume {
        let dims = Dims::new(4, 3, 2);
        let data = (0..dims.len()).map(|i| i as f32 * 0.5 - 3.0).collect();
        let mut v = Volume::new(dims, Spacing([0.8, 1.5, 2.0]), data).unwrap();
        v.origin = [-10.0, 4.0, 2.5];
        v
    }

    #[test]
    fn volume_round_trip_raw_and_gzip() {
        let v = sample_volume();
        for gz in [false, true] {
            let back = decode_volume(&encode_volume(&v, gz)).unwrap();
            assert_eq!(back, v);
        }
    }

    #[test]
    fn labels_round_trip() {
        let dims = Dims::cube(3);
        let labels: Vec<u32> = (0..27).map(|i| (i % 4) as u32).collect();
        let mut map = BTreeMap::new();
        map.insert(1, "liver".to_string());
        map.insert(2, "kidney".to_string());
        map.insert(3, "spleen".to_string());
        let lv = LabelVolume::new(dims, Spacing::iso(1.5), labels, map.clone()).unwrap();
        let back = decode_labels(&encode_labels(&lv, true), &map).unwrap();
        assert_eq!(back, lv);
        // unnamed ids get a placeholder
        let partial = decode_labels(&encode_labels(&lv, false), &BTreeMap::new()).unwrap();
        assert_eq!(partial.class_map[&2], "class_2");
    }

    #[test]
    fn truncated_input_is_rejected() {
        let bytes = encode_volume(&sample_volume(), false);
        assert!(decode_volume(&bytes[..200]).is_err());
        assert!(decode_volume(&bytes[..bytes.len() - 4]).is_err());
        let gz = encode_volume(&sample_volume(), true);
        assert!(decode_volume(&gz[..gz.len() / 2]).is_err());
    }

    #[test]
    fn flipped_axis_is_canonicalized() {
        let v = sample_volume();
        let mut bytes = encode_volume(&v, false);
        // negate x column of the sform: voxel x now runs toward the left
        let sx = -(v.spacing.0[0] as f32);
        bytes[280..284].copy_from_slice(&sx.to_le_bytes());
        let back = decode_volume(&bytes).unwrap();
        assert_eq!(back.dims, v.dims);
        assert_eq!(back.spacing, v.spacing);
        for z in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    assert_eq!(back.get([x, y, z]), v.get([3 - x, y, z]));
                }
            }
        }
    }

    #[test]
    fn permuted_axes_are_canonicalized() {
        let v = sample_volume();
        let mut bytes = encode_volume(&v, false);
        // voxel axis 0 -> world y, voxel axis 1 -> world x
        let put = |b: &mut Vec<u8>, at: usize, val: f32| b[at..at + 4].copy_from_slice(&val.to_le_bytes());
        put(&mut bytes, 280, 0.0);
        put(&mut bytes, 284, 1.5);
        put(&mut bytes, 296, 0.8);
        put(&mut bytes, 300, 0.0);
        let back = decode_volume(&bytes).unwrap();
        assert_eq!(back.dims, Dims::new(3, 4, 2));
        assert_eq!(back.spacing.0, [1.5, 0.8, 2.0]);
        assert_eq!(back.get([2, 1, 1]), v.get([1, 2, 1]));
    }
}
