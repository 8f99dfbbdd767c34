//! Portable binary envelope shared by batch, trajectory and checkpoint files.
//!
//! Layout (format version 1):
//!
//! ```text
//! BIOCAST <version> <header-bytes>\n
//! <header: UTF-8 JSON, exactly header-bytes long>
//! <payload: arrays back to back, little-endian, row-major>
//! ```
//!
//! The header lists every array with its dtype, shape, byte offset and byte
//! length, the total payload length and the SHA-256 of the payload.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MAGIC: &str = "BIOCAST";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ContainerError {
    #[error("not a container file (bad magic line)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("payload truncated: header declares {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("payload has {extra} unexpected trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("array layout disagrees with payload: {0}")]
    ShapeMismatch(String),
    #[error("checksum mismatch: header {expected}, payload {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("expected a `{expected}` container, found `{found}`")]
    WrongKind { expected: String, found: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    pub payload_bytes: usize,
    pub checksum: String,
    pub arrays: Vec<ArrayEntry>,
    pub meta: serde_json::Value,
}

/// Header and payload as stored, without any consistency checks.
#[derive(Clone, Debug, PartialEq)]
pub struct RawContainer {
    pub header: Header,
    pub payload: Vec<u8>,
}

impl RawContainer {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = format!("{MAGIC} {} {}\n", self.header.format_version, header.len()).into_bytes();
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        out
    }

    /// Splits the envelope; only the magic line and header JSON are checked.
    pub fn parse(bytes: &[u8]) -> Result<Self, ContainerError> {
        let nl = bytes.iter().take(64).position(|&b| b == b'\n').ok_or(ContainerError::BadMagic)?;
        let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| ContainerError::BadMagic)?;
        let mut parts = line.split(' ');
        if parts.next() != Some(MAGIC) {
            return Err(ContainerError::BadMagic);
        }
        let version: u32 = parts.next().and_then(|v| v.parse().ok()).ok_or(ContainerError::BadMagic)?;
        if version != FORMAT_VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let hlen: usize = parts.next().and_then(|v| v.parse().ok()).ok_or(ContainerError::BadMagic)?;
        let start = nl + 1;
        if bytes.len() < start + hlen {
            return Err(ContainerError::Truncated { expected: hlen, actual: bytes.len() - start });
        }
        let header: Header = serde_json::from_slice(&bytes[start..start + hlen])
            .map_err(|e| ContainerError::Header(e.to_string()))?;
        if header.format_version != version {
            return Err(ContainerError::UnsupportedVersion(header.format_version));
        }
        Ok(Self { header, payload: bytes[start + hlen..].to_vec() })
    }

    /// Checks payload length, array layout and checksum, in that order.
    pub fn verify(&self) -> Result<(), ContainerError> {
        let h = &self.header;
        if self.payload.len() < h.payload_bytes {
            return Err(ContainerError::Truncated { expected: h.payload_bytes, actual: self.payload.len() });
        }
        if self.payload.len() > h.payload_bytes {
            return Err(ContainerError::TrailingBytes { extra: self.payload.len() - h.payload_bytes });
        }
        let mut offset = 0;
        for a in &h.arrays {
            let want = a.shape.iter().product::<usize>() * a.dtype.size();
            if a.nbytes != want {
                return Err(ContainerError::ShapeMismatch(format!(
                    "`{}` shape {:?} needs {want} bytes, header says {}",
                    a.name, a.shape, a.nbytes
                )));
            }
            if a.offset != offset {
                return Err(ContainerError::ShapeMismatch(format!("`{}` offset {} expected {offset}", a.name, a.offset)));
            }
            offset += a.nbytes;
        }
        if offset != h.payload_bytes {
            return Err(ContainerError::ShapeMismatch(format!(
                "arrays cover {offset} bytes of a {} byte payload",
                h.payload_bytes
            )));
        }
        let actual = checksum(&self.payload);
        if actual != h.checksum {
            return Err(ContainerError::ChecksumMismatch { expected: h.checksum.clone(), actual });
        }
        Ok(())
    }
}

pub fn checksum(payload: &[u8]) -> String {
    hex::encode(Sha256::digest(payload))
}

/// Accumulates arrays into a container payload.
#[derive(Debug)]
pub struct ContainerWriter {
    kind: String,
    arrays: Vec<ArrayEntry>,
    payload: Vec<u8>,
}

impl ContainerWriter {
    pub fn new(kind: &str) -> Self {
        Self { kind: kind.to_string(), arrays: Vec::new(), payload: Vec::new() }
    }

    fn entry(&mut self, name: &str, dtype: DType, shape: &[usize], nbytes: usize) {
        self.arrays.push(ArrayEntry {
            name: name.to_string(),
            dtype,
            shape: shape.to_vec(),
            offset: self.payload.len() - nbytes,
            nbytes,
        });
    }

    pub fn push_f32<'a>(&mut self, name: &str, shape: &[usize], data: impl IntoIterator<Item = &'a f32>) {
        let before = self.payload.len();
        for v in data {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
        let n = self.payload.len() - before;
        debug_assert_eq!(n, shape.iter().product::<usize>() * 4);
        self.entry(name, DType::F32, shape, n);
    }

    pub fn push_f64(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        let before = self.payload.len();
        for v in data {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
        let n = self.payload.len() - before;
        debug_assert_eq!(n, shape.iter().product::<usize>() * 8);
        self.entry(name, DType::F64, shape, n);
    }

    pub fn finish(self, meta: serde_json::Value) -> RawContainer {
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind,
            payload_bytes: self.payload.len(),
            checksum: checksum(&self.payload),
            arrays: self.arrays,
            meta,
        };
        RawContainer { header, payload: self.payload }
    }
}

/// Verified container with typed array access.
#[derive(Debug)]
pub struct ContainerReader {
    raw: RawContainer,
}

impl ContainerReader {
    pub fn from_bytes(bytes: &[u8], kind: &str) -> Result<Self, ContainerError> {
        let raw = RawContainer::parse(bytes)?;
        raw.verify()?;
        if raw.header.kind != kind {
            return Err(ContainerError::WrongKind { expected: kind.to_string(), found: raw.header.kind.clone() });
        }
        Ok(Self { raw })
    }

    pub fn header(&self) -> &Header {
        &self.raw.header
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.raw.header.meta
    }

    pub fn entry(&self, name: &str) -> Option<&ArrayEntry> {
        self.raw.header.arrays.iter().find(|a| a.name == name)
    }

    pub fn f32_array(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>), ContainerError> {
        let a = self.entry(name).ok_or_else(|| ContainerError::Header(format!("missing array `{name}`")))?;
        if a.dtype != DType::F32 {
            return Err(ContainerError::Header(format!("`{name}` is not f32")));
        }
        let bytes = &self.raw.payload[a.offset..a.offset + a.nbytes];
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok((a.shape.clone(), data))
    }

    pub fn f64_array(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>), ContainerError> {
        let a = self.entry(name).ok_or_else(|| ContainerError::Header(format!("missing array `{name}`")))?;
        if a.dtype != DType::F64 {
            return Err(ContainerError::Header(format!("`{name}` is not f64")));
        }
        let bytes = &self.raw.payload[a.offset..a.offset + a.nbytes];
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((a.shape.clone(), data))
    }
}
