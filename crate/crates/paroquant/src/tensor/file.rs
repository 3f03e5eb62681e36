//! `PQT1` binary tensor container.
//!
//! Layout: 4-byte magic `PQT1`, `u32` little-endian header length, UTF-8 JSON
//! header, then the raw little-endian payload arrays concatenated in header
//! order. Header schema:
//!
//! ```json
//! {"tensors":[{"name":"w","shape":[2,2],"dtype":"f32","role":"weight"}],
//!  "meta":{"bits":4}}
//! ```
//!
//! `meta` is an optional free-form object used for scalar header fields
//! (bits, group size, rotation counts, ...). Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PQT1";

/// Payload of one named tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::I32(_) => "i32",
            TensorData::U8(_) => "u8",
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len() * 4,
            TensorData::I32(v) => v.len() * 4,
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match self {
            TensorData::F32(v) => Ok(v),
            _ => Err(Error::Format("expected f32 tensor".into())),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32]> {
        match self {
            TensorData::I32(v) => Ok(v),
            _ => Err(Error::Format("expected i32 tensor".into())),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match self {
            TensorData::U8(v) => Ok(v),
            _ => Err(Error::Format("expected u8 tensor".into())),
        }
    }
}

/// One named tensor plus its shape and role tag.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: String,
    pub data: TensorData,
}

impl TensorEntry {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        role: impl Into<String>,
        data: TensorData,
    ) -> Self {
        Self { name: name.into(), shape, role: role.into(), data }
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderTensor {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    role: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<HeaderTensor>,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    meta: serde_json::Map<String, serde_json::Value>,
}

/// In-memory form of a container file.
#[derive(Debug, Clone, Default)]
pub struct TensorFile {
    pub entries: Vec<TensorEntry>,
    pub meta: serde_json::Map<String, serde_json::Value>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: TensorEntry) {
        self.entries.push(entry);
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format(format!("missing or non-integer meta field `{key}`")))
    }

    pub fn get(&self, name: &str) -> Result<&TensorEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("tensor `{name}` not found")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut names = std::collections::HashSet::new();
        for e in &self.entries {
            if !names.insert(&e.name) {
                return Err(Error::InvalidArgument(format!("duplicate tensor name `{}`", e.name)));
            }
            let expected: usize = e.shape.iter().product();
            if expected != e.data.len() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor `{}`: shape {:?} needs {} elements, got {}",
                    e.name,
                    e.shape,
                    expected,
                    e.data.len()
                )));
            }
        }
        let header = Header {
            tensors: self
                .entries
                .iter()
                .map(|e| HeaderTensor {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    dtype: e.data.dtype().to_string(),
                    role: e.role.clone(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Format(format!("header encode: {e}")))?;
        let payload_len: usize = self.entries.iter().map(|e| e.data.byte_len()).sum();
        let mut out = Vec::with_capacity(8 + header_bytes.len() + payload_len);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for e in &self.entries {
            match &e.data {
                TensorData::F32(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::I32(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("file shorter than fixed header".into()));
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:02x?}, expected {:02x?}",
                &bytes[0..4],
                MAGIC
            )));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() < 8 + header_len {
            return Err(Error::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])
            .map_err(|e| Error::Format(format!("header decode: {e}")))?;
        let mut offset = 8 + header_len;
        let mut entries = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let count: usize = t.shape.iter().product();
            let (data, byte_len) = match t.dtype.as_str() {
                "f32" => {
                    let byte_len = count * 4;
                    let slice = payload_slice(bytes, offset, byte_len, &t.name)?;
                    let v = slice
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    (TensorData::F32(v), byte_len)
                }
                "i32" => {
                    let byte_len = count * 4;
                    let slice = payload_slice(bytes, offset, byte_len, &t.name)?;
                    let v = slice
                        .chunks_exact(4)
                        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    (TensorData::I32(v), byte_len)
                }
                "u8" => {
                    let slice = payload_slice(bytes, offset, count, &t.name)?;
                    (TensorData::U8(slice.to_vec()), count)
                }
                other => {
                    return Err(Error::Format(format!(
                        "tensor `{}`: unsupported dtype `{other}`",
                        t.name
                    )))
                }
            };
            offset += byte_len;
            entries.push(TensorEntry { name: t.name, shape: t.shape, role: t.role, data });
        }
        if offset != bytes.len() {
            return Err(Error::Format(format!(
                "trailing payload bytes: consumed {offset}, file has {}",
                bytes.len()
            )));
        }
        Ok(Self { entries, meta: header.meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn payload_slice<'a>(bytes: &'a [u8], offset: usize, len: usize, name: &str) -> Result<&'a [u8]> {
    bytes
        .get(offset..offset + len)
        .ok_or_else(|| Error::Format(format!("truncated payload for tensor `{name}`")))
}

/// Save named matrices with the given roles.
pub fn save_tensors(
    path: impl AsRef<Path>,
    tensors: &[(&str, &super::Matrix, &str)],
) -> Result<()> {
    let mut file = TensorFile::new();
    for (name, m, role) in tensors {
        file.push(TensorEntry::new(
            *name,
            vec![m.rows, m.cols],
            *role,
            TensorData::F32(m.data.clone()),
        ));
    }
    file.save(path)
}

/// Load every f32 matrix entry of a container, in header order.
pub fn load_tensors(path: impl AsRef<Path>) -> Result<Vec<(String, super::Matrix)>> {
    let file = TensorFile::load(path)?;
    file.entries
        .iter()
        .map(|e| {
            if e.shape.len() != 2 {
                return Err(Error::Format(format!(
                    "tensor `{}` is not a matrix (shape {:?})",
                    e.name, e.shape
                )));
            }
            let data = e.data.as_f32()?.to_vec();
            Ok((
                e.name.clone(),
                super::Matrix { rows: e.shape[0], cols: e.shape[1], data },
            ))
        })
        .collect()
}
