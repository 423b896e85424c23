//! Versioned binary weight archives.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PSG3"                      magic
//! u32                          format version
//! u32                          header length H
//! H bytes                      JSON header: format_version, kind, dtype, seed, config
//! u32                          tensor count
//! per tensor:
//!   u32 + bytes                name (UTF-8)
//!   u32                        ndim
//!   ndim × u64                 dims
//!   prod(dims) × dtype         IEEE-754 values, row-major
//! full archives only:
//!   u64 + count × f64          positional-encoding frequency matrix
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::NetConfig;
use super::graph::ParamStore;
use super::model::{EncoderState, ModelState};
use super::scalar::Scalar;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PSG3";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchiveKind {
    Full,
    Encoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub format_version: u32,
    pub kind: ArchiveKind,
    pub dtype: String,
    pub seed: u64,
    pub config: NetConfig,
}

fn write_archive<T: Scalar>(
    kind: ArchiveKind,
    config: &NetConfig,
    seed: u64,
    params: &ParamStore<T>,
    pe: Option<&[f64]>,
) -> Vec<u8> {
    let header = ArchiveHeader {
        format_version: FORMAT_VERSION,
        kind,
        dtype: T::DTYPE.to_string(),
        seed,
        config: config.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + params.scalar_count() * T::byte_width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for e in params.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(e.rows as u64).to_le_bytes());
        out.extend_from_slice(&(e.cols as u64).to_le_bytes());
        for &v in &e.data {
            v.to_le(&mut out);
        }
    }
    if let Some(pe) = pe {
        out.extend_from_slice(&(pe.len() as u64).to_le_bytes());
        for v in pe {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Archive(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct Parsed<T> {
    header: ArchiveHeader,
    params: ParamStore<T>,
    pe: Option<Vec<f64>>,
}

/// Reads values stored as `f32` or `f64` into any scalar type.
fn read_values<T: Scalar>(r: &mut Reader<'_>, dtype: &str, n: usize) -> Result<Vec<T>> {
    match dtype {
        "f32" => Ok(r
            .take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Archive("tensor too large".into()))?,
            )?
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect()),
        "f64" => Ok(r
            .take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Archive("tensor too large".into()))?,
            )?
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect()),
        other => Err(Error::Archive(format!("unknown dtype {other}"))),
    }
}

fn parse<T: Scalar>(buf: &[u8]) -> Result<Parsed<T>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Archive("not a weight archive (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = r.u32()? as usize;
    let header: ArchiveHeader = serde_json::from_slice(r.take(hlen)?)?;
    if header.format_version != version {
        return Err(Error::Version {
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Archive("tensor name is not UTF-8".into()))?
            .to_string();
        if params.id(&name).is_some() {
            return Err(Error::Archive(format!("duplicate tensor {name}")));
        }
        let ndim = r.u32()?;
        if ndim != 2 {
            return Err(Error::Archive(format!("{name}: expected 2 dims, found {ndim}")));
        }
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Archive(format!("{name}: dims overflow")))?;
        let data = read_values(&mut r, &header.dtype, n)?;
        params.insert(&name, rows, cols, data);
    }
    let pe = match header.kind {
        ArchiveKind::Full => {
            let n = r.u64()? as usize;
            Some(read_values::<f64>(&mut r, "f64", n)?)
        }
        ArchiveKind::Encoder => None,
    };
    if r.pos != buf.len() {
        return Err(Error::Archive(format!(
            "{} trailing bytes after the last section",
            buf.len() - r.pos
        )));
    }
    Ok(Parsed { header, params, pe })
}

pub fn model_to_bytes<T: Scalar>(m: &ModelState<T>) -> Vec<u8> {
    write_archive(ArchiveKind::Full, &m.config, m.seed, &m.params, Some(&m.pe_frequencies))
}

pub fn model_from_bytes<T: Scalar>(buf: &[u8]) -> Result<ModelState<T>> {
    let p = parse::<T>(buf)?;
    match (p.header.kind, p.pe) {
        (ArchiveKind::Full, Some(pe)) => ModelState::from_parts(p.header.config, p.header.seed, p.params, pe),
        _ => Err(Error::Archive(
            "archive holds encoder weights only, a full model is required".into(),
        )),
    }
}

/// Encoder-only bytes of a full model.
pub fn encoder_to_bytes<T: Scalar>(m: &ModelState<T>) -> Vec<u8> {
    write_archive(
        ArchiveKind::Encoder,
        &m.config,
        m.seed,
        &m.params.subset("encoder."),
        None,
    )
}

/// Accepts both encoder and full archives; a full archive is reduced to
/// its encoder.
pub fn encoder_from_bytes<T: Scalar>(buf: &[u8]) -> Result<EncoderState<T>> {
    let p = parse::<T>(buf)?;
    EncoderState::from_parts(p.header.config, p.header.seed, p.params.subset("encoder."))
}

/// Reads only the header of an archive.
pub fn read_header(buf: &[u8]) -> Result<ArchiveHeader> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Archive("not a weight archive (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = r.u32()? as usize;
    Ok(serde_json::from_slice(r.take(hlen)?)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::File {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, bytes).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_model<T: Scalar>(m: &ModelState<T>, path: &Path) -> Result<()> {
    write_file(path, &model_to_bytes(m))
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<ModelState<T>> {
    model_from_bytes(&read_file(path)?)
}

pub fn export_encoder<T: Scalar>(m: &ModelState<T>, path: &Path) -> Result<()> {
    write_file(path, &encoder_to_bytes(m))
}

pub fn import_encoder<T: Scalar>(path: &Path) -> Result<EncoderState<T>> {
    encoder_from_bytes(&read_file(path)?)
}
