//! Versioned binary container used by every on-disk array format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "VOXKIN01"
//! offset 8   4 bytes   u32 header length H
//! offset 12  H bytes   UTF-8 JSON header
//! then, 8-byte aligned, the section payloads in header order
//! ```
//!
//! The JSON header carries the container `kind`, a format `version`, a
//! kind-specific `meta` object, and one descriptor per section with
//! dtype, shape, absolute byte offset, byte length, and CRC32. See
//! docs/FORMATS.md for the bit-exact description.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"VOXKIN01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
    U32,
    U8,
}

impl Dtype {
    pub fn size(&self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 | Dtype::U32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SectionDesc {
    name: String,
    dtype: Dtype,
    shape: Vec<u64>,
    offset: u64,
    nbytes: u64,
    crc32: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    version: u32,
    meta: serde_json::Value,
    sections: Vec<SectionDesc>,
}

/// One named array scheduled for writing.
pub struct Section {
    pub name: &'static str,
    pub dtype: Dtype,
    pub shape: Vec<u64>,
    pub bytes: Vec<u8>,
}

impl Section {
    pub fn f64(name: &'static str, shape: Vec<u64>, values: &[f64]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * 8);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self { name, dtype: Dtype::F64, shape, bytes }
    }

    pub fn f32(name: &'static str, shape: Vec<u64>, values: &[f32]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self { name, dtype: Dtype::F32, shape, bytes }
    }

    pub fn u32(name: &'static str, shape: Vec<u64>, values: &[u32]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self { name, dtype: Dtype::U32, shape, bytes }
    }

    pub fn u8(name: &'static str, shape: Vec<u64>, values: &[u8]) -> Self {
        Self { name, dtype: Dtype::U8, shape, bytes: values.to_vec() }
    }
}

pub fn write_container(
    path: &Path,
    kind: &str,
    meta: serde_json::Value,
    sections: Vec<Section>,
) -> Result<()> {
    for s in &sections {
        let n: u64 = s.shape.iter().product();
        if n * s.dtype.size() as u64 != s.bytes.len() as u64 {
            return Err(Error::ShapeMismatch(format!(
                "section {}: shape {:?} does not match {} bytes",
                s.name,
                s.shape,
                s.bytes.len()
            )));
        }
    }

    // The header length depends on the offsets, which depend on the
    // header length. Fix it in two passes: compute with zero offsets,
    // then pad the header to a stable length.
    let descs_at = |base: u64| -> Vec<SectionDesc> {
        let mut off = base;
        sections
            .iter()
            .map(|s| {
                off = (off + 7) & !7;
                let d = SectionDesc {
                    name: s.name.to_string(),
                    dtype: s.dtype,
                    shape: s.shape.clone(),
                    offset: off,
                    nbytes: s.bytes.len() as u64,
                    crc32: crc32fast::hash(&s.bytes),
                };
                off += s.bytes.len() as u64;
                d
            })
            .collect()
    };

    let probe = Header {
        kind: kind.to_string(),
        version: FORMAT_VERSION,
        meta: meta.clone(),
        sections: descs_at(u64::MAX / 2),
    };
    let probe_len = serde_json::to_vec(&probe).expect("header serializes").len();
    // Offsets rendered near u64::MAX are at least as wide as the real
    // ones, so probe_len is an upper bound; pad the JSON with spaces to
    // exactly that length (whitespace is legal between JSON tokens).
    let base = 12 + probe_len as u64;
    let header = Header {
        kind: kind.to_string(),
        version: FORMAT_VERSION,
        meta,
        sections: descs_at(base),
    };
    let mut header_json = serde_json::to_vec(&header).expect("header serializes");
    if header_json.len() > probe_len {
        return Err(Error::format(path.display().to_string(), "header sizing failed"));
    }
    header_json.resize(probe_len, b' ');

    let mut out = Vec::with_capacity(base as usize + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(probe_len as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (s, d) in sections.iter().zip(&header.sections) {
        while (out.len() as u64) < d.offset {
            out.push(0);
        }
        out.extend_from_slice(&s.bytes);
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// A parsed container with checksum-verified section payloads.
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    sections: Vec<(SectionDesc, Vec<u8>)>,
    path: String,
}

impl Container {
    pub fn read(path: &Path) -> Result<Self> {
        let pstr = path.display().to_string();
        let bytes = fs::read(path)?;
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::format(&pstr, "bad magic; not a voxkin container"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + hlen {
            return Err(Error::format(&pstr, "truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[12..12 + hlen])
            .map_err(|e| Error::format(&pstr, format!("unreadable header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::format(
                &pstr,
                format!("unsupported format version {}", header.version),
            ));
        }
        let mut sections = Vec::with_capacity(header.sections.len());
        for d in header.sections {
            let lo = d.offset as usize;
            let hi = lo + d.nbytes as usize;
            if hi > bytes.len() {
                return Err(Error::format(&pstr, format!("section {} truncated", d.name)));
            }
            let payload = bytes[lo..hi].to_vec();
            if crc32fast::hash(&payload) != d.crc32 {
                return Err(Error::format(&pstr, format!("section {} checksum mismatch", d.name)));
            }
            let n: u64 = d.shape.iter().product();
            if n * d.dtype.size() as u64 != d.nbytes {
                return Err(Error::format(
                    &pstr,
                    format!("section {}: shape/dtype disagree with payload size", d.name),
                ));
            }
            sections.push((d, payload));
        }
        Ok(Self { kind: header.kind, meta: header.meta, sections, path: pstr })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::format(
                &self.path,
                format!("expected a {kind} container, found {}", self.kind),
            ));
        }
        Ok(())
    }

    fn find(&self, name: &str) -> Result<&(SectionDesc, Vec<u8>)> {
        self.sections
            .iter()
            .find(|(d, _)| d.name == name)
            .ok_or_else(|| Error::format(&self.path, format!("missing section {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.sections.iter().any(|(d, _)| d.name == name)
    }

    pub fn shape(&self, name: &str) -> Result<Vec<u64>> {
        Ok(self.find(name)?.0.shape.clone())
    }

    pub fn f64s(&self, name: &str) -> Result<Vec<f64>> {
        let (d, bytes) = self.find(name)?;
        if d.dtype != Dtype::F64 {
            return Err(Error::format(&self.path, format!("section {name} is not f64")));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f32s(&self, name: &str) -> Result<Vec<f32>> {
        let (d, bytes) = self.find(name)?;
        if d.dtype != Dtype::F32 {
            return Err(Error::format(&self.path, format!("section {name} is not f32")));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn u32s(&self, name: &str) -> Result<Vec<u32>> {
        let (d, bytes) = self.find(name)?;
        if d.dtype != Dtype::U32 {
            return Err(Error::format(&self.path, format!("section {name} is not u32")));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn u8s(&self, name: &str) -> Result<Vec<u8>> {
        let (d, bytes) = self.find(name)?;
        if d.dtype != Dtype::U8 {
            return Err(Error::format(&self.path, format!("section {name} is not u8")));
        }
        Ok(bytes.clone())
    }

    pub fn inconsistent(&self, why: impl Into<String>) -> Error {
        Error::format(&self.path, why.into())
    }
}
