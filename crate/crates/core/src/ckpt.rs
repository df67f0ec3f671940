//! Checkpoint container: a little-endian tensor table with a magic header,
//! format version, and a trailing CRC32 of everything before it.
//!
//! Layout: `"TLRA"` | version u32 | per tensor { name_len u32, UTF-8 name,
//! ndim u32, dims u64 × ndim, f32 payload } | CRC32 u32. Tensor order is
//! preserved on round-trip and all values survive bitwise.

use crate::tensor::Tensor;
use indexmap::IndexMap;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"TLRA";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("checkpoint not found: {0}")]
    Missing(PathBuf),
    #[error("checkpoint schema violation: {0}")]
    Schema(String),
    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error(transparent)]
    Io(std::io::Error),
}

impl CkptError {
    /// Process exit code the error maps to: 2 missing, 3 schema, 4 CRC.
    pub fn exit_code(&self) -> i32 {
        match self {
            CkptError::Missing(_) => 2,
            CkptError::Schema(_) => 3,
            CkptError::CrcMismatch { .. } => 4,
            CkptError::Io(_) => 1,
        }
    }
}

/// Serialize tensors in iteration order.
pub fn write_bytes<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, tensor) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CkptError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                CkptError::Schema(format!("truncated while reading {what} at byte {}", self.at))
            })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CkptError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CkptError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parse a serialized checkpoint, verifying magic, version, table structure,
/// and the trailing CRC32.
pub fn read_bytes(bytes: &[u8]) -> Result<IndexMap<String, Tensor>, CkptError> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(CkptError::Schema(format!(
            "file of {} bytes is shorter than the smallest valid checkpoint",
            bytes.len()
        )));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CkptError::CrcMismatch { stored, computed });
    }
    let mut r = Reader { bytes: body, at: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CkptError::Schema(format!(
            "bad magic {:02x?}, expected {:02x?}",
            magic, MAGIC
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CkptError::Schema(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let mut out = IndexMap::new();
    while r.at < body.len() {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| CkptError::Schema("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        let mut numel = 1usize;
        for _ in 0..ndim {
            let d = r.u64("dim")?;
            let d: usize = d
                .try_into()
                .map_err(|_| CkptError::Schema(format!("dimension {d} overflows")))?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| CkptError::Schema("tensor size overflows".into()))?;
            dims.push(d);
        }
        let payload = r.take(numel * 4, &format!("payload of {name}"))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if out.insert(name.clone(), Tensor::new(dims, data)).is_some() {
            return Err(CkptError::Schema(format!("duplicate tensor name {name}")));
        }
    }
    Ok(out)
}

/// Write a checkpoint file.
pub fn save<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<(), CkptError> {
    std::fs::write(path, write_bytes(tensors)).map_err(CkptError::Io)
}

/// Read a checkpoint file; a missing file is its own error kind.
pub fn load(path: &Path) -> Result<IndexMap<String, Tensor>, CkptError> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == ErrorKind::NotFound {
            CkptError::Missing(path.to_path_buf())
        } else {
            CkptError::Io(e)
        }
    })?;
    read_bytes(&bytes)
}
