//! The `.obsd` container: one little-endian framing for models,
//! calibration sets and Hessian snapshots.
//!
//! Layout:
//!
//! ```text
//! magic      "OBSD"                4 bytes
//! version    u32
//! meta_len   u32, then meta_len bytes of UTF-8 JSON (an object)
//! n_records  u32
//! per record:
//!   name_len u32, name bytes (UTF-8)
//!   dtype    u8   (0 = f32, 1 = f64)
//!   rank     u32, then rank × u64 dims
//!   data     product(dims) × dtype size bytes
//! ```

use std::collections::HashSet;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OBSD";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "obsd";

const MAX_RANK: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            c => Err(Error::UnknownDtype(c)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Element buffer. Equality is bitwise, so NaN payloads and signed zeros
/// survive round-trip comparisons.
#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    /// Widens to f64 regardless of storage dtype.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

impl PartialEq for TensorData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl TensorRecord {
    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data: TensorData::F32(data),
        }
    }

    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape,
            data: TensorData::F64(data),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::BadShape {
                name: self.name.clone(),
                reason: format!("zero dimension in {:?}", self.shape),
            });
        }
        let count = self
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::BadShape {
                name: self.name.clone(),
                reason: "element count overflows".into(),
            })?;
        if count != self.data.len() {
            return Err(Error::BadShape {
                name: self.name.clone(),
                reason: format!(
                    "shape {:?} needs {count} elements, data has {}",
                    self.shape,
                    self.data.len()
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub version: u32,
    /// Raw JSON text; kept verbatim so round trips are byte-exact.
    pub metadata: String,
    pub records: Vec<TensorRecord>,
}

impl Default for Container {
    fn default() -> Self {
        Self {
            version: VERSION,
            metadata: "{}".into(),
            records: Vec::new(),
        }
    }
}

impl Container {
    pub fn new(metadata: &serde_json::Value, records: Vec<TensorRecord>) -> Result<Self> {
        if !metadata.is_object() {
            return Err(Error::BadMetadata("metadata must be a JSON object".into()));
        }
        Ok(Self {
            version: VERSION,
            metadata: serde_json::to_string(metadata)
                .map_err(|e| Error::BadMetadata(e.to_string()))?,
            records,
        })
    }

    pub fn metadata_json(&self) -> Result<serde_json::Map<String, serde_json::Value>> {
        parse_metadata(&self.metadata)
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        write_container(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        read_container(bytes)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        read_container(&std::fs::read(path)?)
    }
}

fn parse_metadata(text: &str) -> Result<serde_json::Map<String, serde_json::Value>> {
    match serde_json::from_str::<serde_json::Value>(text) {
        Ok(serde_json::Value::Object(map)) => Ok(map),
        Ok(_) => Err(Error::BadMetadata("metadata must be a JSON object".into())),
        Err(e) => Err(Error::BadMetadata(e.to_string())),
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::BadMetadata(format!("{what} too long")))
}

pub fn write_container(container: &Container) -> Result<Vec<u8>> {
    parse_metadata(&container.metadata)?;
    let mut seen = HashSet::new();
    for rec in &container.records {
        if !seen.insert(rec.name.as_str()) {
            return Err(Error::DuplicateName(rec.name.clone()));
        }
        rec.validate()?;
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&container.version.to_le_bytes());
    out.extend_from_slice(&len_u32(container.metadata.len(), "metadata")?.to_le_bytes());
    out.extend_from_slice(container.metadata.as_bytes());
    out.extend_from_slice(&len_u32(container.records.len(), "record list")?.to_le_bytes());
    for rec in &container.records {
        out.extend_from_slice(&len_u32(rec.name.len(), "name")?.to_le_bytes());
        out.extend_from_slice(rec.name.as_bytes());
        out.push(rec.data.dtype().code());
        out.extend_from_slice(&len_u32(rec.shape.len(), "shape")?.to_le_bytes());
        for &d in &rec.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &rec.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Truncated(format!("{what} at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn read_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < MAGIC.len() {
        return if MAGIC.starts_with(bytes) {
            Err(Error::Truncated("magic".into()))
        } else {
            Err(Error::NotAContainer)
        };
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::NotAContainer);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32("version")?;
    let meta_len = r.u32("metadata length")? as usize;
    let meta = r.take(meta_len, "metadata")?;
    let metadata = std::str::from_utf8(meta)
        .map_err(|e| Error::BadMetadata(e.to_string()))?
        .to_string();
    parse_metadata(&metadata)?;

    let n_records = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(n_records.min(1024));
    let mut seen = HashSet::new();
    for _ in 0..n_records {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| Error::BadMetadata(format!("tensor name: {e}")))?
            .to_string();
        let dtype = Dtype::from_code(r.take(1, "dtype")?[0])?;
        let rank = r.u32("rank")?;
        if rank > MAX_RANK {
            return Err(Error::BadShape {
                name,
                reason: format!("rank {rank} exceeds {MAX_RANK}"),
            });
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = r.u64("dims")?;
            let d = usize::try_from(d).map_err(|_| Error::BadShape {
                name: name.clone(),
                reason: "dimension overflows".into(),
            })?;
            if d == 0 {
                return Err(Error::BadShape {
                    name,
                    reason: "zero dimension".into(),
                });
            }
            shape.push(d);
        }
        let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n_bytes = count.and_then(|c| c.checked_mul(dtype.size()));
        let n_bytes = match n_bytes {
            Some(b) if b <= r.remaining() => b,
            _ => return Err(Error::Truncated(format!("data of `{name}`"))),
        };
        let raw = r.take(n_bytes, "data")?;
        let data = match dtype {
            Dtype::F32 => TensorData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F64 => TensorData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateName(name));
        }
        records.push(TensorRecord { name, shape, data });
    }
    if r.remaining() != 0 {
        return Err(Error::BadMetadata(format!(
            "{} trailing bytes after last record",
            r.remaining()
        )));
    }
    Ok(Container {
        version,
        metadata,
        records,
    })
}
