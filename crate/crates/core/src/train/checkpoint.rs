//! Binary parameter checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "FLWR" | version u32 | entry count u32
//! per entry: name len u16 | UTF-8 name | dtype u8 (0 = f32, 1 = f64)
//!            | rank u8 | dims u32 x rank | payload
//! CRC32 of everything above, u32
//! ```

use std::path::Path;

use thiserror::Error;

use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"FLWR";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("invalid entry: {0}")]
    InvalidEntry(String),
    #[error("missing entry `{0}`")]
    MissingEntry(String),
    #[error("entry `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<u32>,
    payload: Vec<u8>,
}

impl Entry {
    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// Decodes the payload, converting to `T` if the stored dtype differs.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let shape = self.shape();
        let data: Vec<T> = match self.dtype {
            DType::F32 => self
                .payload
                .chunks_exact(4)
                .map(|c| T::of(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => self
                .payload
                .chunks_exact(8)
                .map(|c| T::of(f64::read_le(c)))
                .collect(),
        };
        Tensor::new(shape, data).expect("entry payload validated on decode")
    }
}

/// Ordered set of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<Entry>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let out = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends or replaces the entry called `name`.
    pub fn insert<T: Real>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        let name = name.into();
        let mut payload = Vec::with_capacity(tensor.numel() * T::DTYPE.size());
        for &v in tensor.data() {
            v.write_le(&mut payload);
        }
        let entry = Entry {
            name,
            dtype: T::DTYPE,
            dims: tensor.shape().iter().map(|&d| d as u32).collect(),
            payload,
        };
        match self.entries.iter_mut().find(|e| e.name == entry.name) {
            Some(slot) => *slot = entry,
            None => self.entries.push(entry),
        }
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get<T: Real>(&self, name: &str) -> Result<Tensor<T>, CheckpointError> {
        self.entry(name)
            .map(Entry::to_tensor)
            .ok_or_else(|| CheckpointError::MissingEntry(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.code());
            out.push(e.dims.len() as u8);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&e.payload);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated);
        }
        let body_len = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..body_len]);
        if stored != computed {
            return Err(CheckpointError::CrcMismatch { stored, computed });
        }
        let mut r = Reader {
            bytes: &bytes[..body_len],
            pos: 8,
        };
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::InvalidEntry("name is not UTF-8".into()))?
                .to_string();
            let dtype = DType::from_code(r.u8()?)
                .ok_or_else(|| CheckpointError::InvalidEntry(format!("{name}: unknown dtype")))?;
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()?);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .ok_or_else(|| CheckpointError::InvalidEntry(format!("{name}: size overflow")))?;
            let payload = r.take(numel * dtype.size())?.to_vec();
            entries.push(Entry {
                name,
                dtype,
                dims,
                payload,
            });
        }
        if r.pos != body_len {
            return Err(CheckpointError::InvalidEntry("trailing bytes".into()));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
