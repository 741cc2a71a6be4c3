//! `GMST` tensor archive.
//!
//! Layout: `b"GMST"` | version `u32` LE | header length `u64` LE | JSON
//! header | payload. The header lists `{name, dtype, shape, offset, nbytes}`
//! per tensor (sorted by name, offsets relative to the payload start, 8-byte
//! aligned) plus a string metadata map. The header is space-padded so that
//! the payload itself starts on an 8-byte boundary. All floats are little
//! endian regardless of host.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GmsError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GMST";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn of<T: Scalar>() -> Self {
        if T::DTYPE == "f64" {
            DType::F64
        } else {
            DType::F32
        }
    }
}

/// Raw stored tensor: dtype, shape and little-endian element bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchiveTensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl ArchiveTensor {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::BYTES);
        t.data().iter().for_each(|&v| v.write_le(&mut bytes));
        ArchiveTensor {
            dtype: DType::of::<T>(),
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype != DType::of::<T>() {
            return Err(GmsError::Format(format!(
                "stored dtype {:?} does not match requested {}",
                self.dtype,
                T::DTYPE
            )));
        }
        let data = self.bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor::new(&self.shape, data)
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<Entry>,
    metadata: BTreeMap<String, String>,
}

/// Named tensors plus free-form string metadata.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Archive {
    tensors: BTreeMap<String, ArchiveTensor>,
    pub metadata: BTreeMap<String, String>,
}

fn align8(x: usize) -> usize {
    x.div_ceil(8) * 8
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor. Names must be non-empty and unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: ArchiveTensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(GmsError::Usage(
                "archive tensor names must be non-empty".into(),
            ));
        }
        if self.tensors.contains_key(&name) {
            return Err(GmsError::Usage(format!(
                "duplicate archive tensor name {name:?}"
            )));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn insert_tensor<T: Scalar>(
        &mut self,
        name: impl Into<String>,
        t: &Tensor<T>,
    ) -> Result<()> {
        self.insert(name, ArchiveTensor::from_tensor(t))
    }

    pub fn tensors(&self) -> &BTreeMap<String, ArchiveTensor> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveTensor> {
        self.tensors.get(name)
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)
            .ok_or_else(|| GmsError::Format(format!("archive has no tensor {name:?}")))?
            .to_tensor()
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| GmsError::Format(format!("archive metadata lacks {key:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let expected = t.dtype.size() * t.shape.iter().product::<usize>();
            if expected != t.bytes.len() {
                return Err(GmsError::Usage(format!(
                    "tensor {name:?}: {} bytes for shape {:?}",
                    t.bytes.len(),
                    t.shape
                )));
            }
            entries.push(Entry {
                name: name.clone(),
                dtype: t.dtype,
                shape: t.shape.clone(),
                offset: offset as u64,
                nbytes: t.bytes.len() as u64,
            });
            offset = align8(offset + t.bytes.len());
        }
        let header = Header {
            tensors: entries,
            metadata: self.metadata.clone(),
        };
        let mut header_bytes = serde_json::to_vec(&header)?;
        header_bytes.resize(align8(PREAMBLE + header_bytes.len()) - PREAMBLE, b' ');

        let mut out = Vec::with_capacity(PREAMBLE + header_bytes.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        let payload_start = out.len();
        for (entry, t) in header.tensors.iter().zip(self.tensors.values()) {
            out.resize(payload_start + entry.offset as usize, 0);
            out.extend_from_slice(&t.bytes);
        }
        out.resize(payload_start + offset, 0);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE {
            return Err(GmsError::Format(format!(
                "file is {} bytes, shorter than the {PREAMBLE}-byte preamble",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(GmsError::Format(format!(
                "bad magic {:?}, expected \"GMST\"",
                &bytes[..4]
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version > VERSION {
            return Err(GmsError::Version {
                found: version,
                supported: VERSION,
            });
        }
        if version == 0 {
            return Err(GmsError::Format("archive version 0 is invalid".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let payload_start = (PREAMBLE as u64)
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| {
                GmsError::Corruption(format!(
                    "header length {header_len} runs past end of {}-byte file",
                    bytes.len()
                ))
            })? as usize;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..payload_start])
            .map_err(|e| GmsError::Format(format!("unreadable header: {e}")))?;
        let payload = &bytes[payload_start..];

        let mut archive = Archive {
            tensors: BTreeMap::new(),
            metadata: header.metadata,
        };
        let mut min_offset = 0u64;
        for e in header.tensors {
            let numel: usize = e.shape.iter().product();
            if e.nbytes != (numel * e.dtype.size()) as u64 {
                return Err(GmsError::Corruption(format!(
                    "tensor {:?}: nbytes {} does not match {:?} of shape {:?}",
                    e.name, e.nbytes, e.dtype, e.shape
                )));
            }
            if e.offset % 8 != 0 {
                return Err(GmsError::Corruption(format!(
                    "tensor {:?}: offset {} not 8-byte aligned",
                    e.name, e.offset
                )));
            }
            if e.offset < min_offset {
                return Err(GmsError::Corruption(format!(
                    "tensor {:?}: offset {} overlaps previous tensor (ends at {min_offset})",
                    e.name, e.offset
                )));
            }
            let end = e.offset + e.nbytes;
            if end > payload.len() as u64 {
                return Err(GmsError::Corruption(format!(
                    "truncated payload: tensor {:?} needs {end} bytes, payload has {}",
                    e.name,
                    payload.len()
                )));
            }
            min_offset = end;
            let t = ArchiveTensor {
                dtype: e.dtype,
                shape: e.shape,
                bytes: payload[e.offset as usize..end as usize].to_vec(),
            };
            if archive.tensors.insert(e.name.clone(), t).is_some() {
                return Err(GmsError::Corruption(format!(
                    "duplicate tensor {:?}",
                    e.name
                )));
            }
        }
        Ok(archive)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| GmsError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| GmsError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes `tensors` and `metadata` to `path`, rejecting duplicate names.
pub fn write_archive(
    path: impl AsRef<Path>,
    tensors: impl IntoIterator<Item = (String, ArchiveTensor)>,
    metadata: BTreeMap<String, String>,
) -> Result<()> {
    let mut a = Archive::new();
    for (name, t) in tensors {
        a.insert(name, t)?;
    }
    a.metadata = metadata;
    a.write(path)
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<Archive> {
    Archive::read(path)
}
