//! `.avdt` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "AVDT"
//! version    u32      currently 1
//! count      u32      number of entries
//! entries    count ×  { name_len u32, name utf-8, dtype u8, ndim u32,
//!                       dims u64 × ndim, offset u64, nbytes u64 }
//! payload    raw little-endian values; `offset` is from the start of the file
//! ```
//!
//! dtype codes: 0 = f32, 1 = f64, 2 = u8 (opaque bytes, e.g. JSON metadata).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 4] = b"AVDT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    Bytes(Vec<u8>),
}

impl Entry {
    fn dtype_code(&self) -> u8 {
        match self {
            Entry::F32(_) => 0,
            Entry::F64(_) => 1,
            Entry::Bytes(_) => 2,
        }
    }

    fn dims(&self) -> Vec<usize> {
        match self {
            Entry::F32(t) => t.shape().to_vec(),
            Entry::F64(t) => t.shape().to_vec(),
            Entry::Bytes(b) => vec![b.len()],
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            Entry::F32(t) => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            Entry::F64(t) => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            Entry::Bytes(b) => b.clone(),
        }
    }
}

/// Ordered collection of named entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    entries: BTreeMap<String, Entry>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: Entry) {
        self.entries.insert(name.into(), entry);
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.insert(name, Entry::F32(t));
    }

    pub fn insert_json<S: Serialize>(&mut self, name: impl Into<String>, value: &S) -> Result<()> {
        self.insert(name, Entry::Bytes(serde_json::to_vec(value)?));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn f32(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.entries.get(name) {
            Some(Entry::F32(t)) => Ok(t),
            Some(_) => Err(Error::Format(format!("entry `{name}` is not f32"))),
            None => Err(Error::Format(format!("missing entry `{name}`"))),
        }
    }

    pub fn json<D: DeserializeOwned>(&self, name: &str) -> Result<D> {
        match self.entries.get(name) {
            Some(Entry::Bytes(b)) => Ok(serde_json::from_slice(b)?),
            Some(_) => Err(Error::Format(format!("entry `{name}` is not a byte entry"))),
            None => Err(Error::Format(format!("missing entry `{name}`"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Vec::new();
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        header.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let header_len = 12
            + self
                .entries
                .iter()
                .map(|(name, e)| 4 + name.len() + 1 + 4 + 8 * e.dims().len() + 16)
                .sum::<usize>();
        let mut payload = Vec::new();
        for (name, e) in &self.entries {
            let bytes = e.payload();
            header.extend_from_slice(&(name.len() as u32).to_le_bytes());
            header.extend_from_slice(name.as_bytes());
            header.push(e.dtype_code());
            let dims = e.dims();
            header.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                header.extend_from_slice(&(d as u64).to_le_bytes());
            }
            header.extend_from_slice(&((header_len + payload.len()) as u64).to_le_bytes());
            header.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            payload.extend_from_slice(&bytes);
        }
        debug_assert_eq!(header.len(), header_len);
        header.extend_from_slice(&payload);
        header
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut spans: Vec<(usize, usize)> = Vec::with_capacity(count);
        let mut out = TensorFile::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("entry name is not utf-8".into()))?;
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            let nbytes = r.u64()? as usize;
            let end = offset
                .checked_add(nbytes)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::Format(format!("entry `{name}` out of bounds")))?;
            let raw = &bytes[offset..end];
            let numel: usize = dims.iter().product();
            let entry = match dtype {
                0 => {
                    check_len(&name, nbytes, numel * 4)?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Entry::F32(Tensor::new(dims, data)?)
                }
                1 => {
                    check_len(&name, nbytes, numel * 8)?;
                    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Entry::F64(Tensor::new(dims, data)?)
                }
                2 => {
                    check_len(&name, nbytes, numel)?;
                    Entry::Bytes(raw.to_vec())
                }
                other => return Err(Error::Format(format!("unknown dtype code {other}"))),
            };
            spans.push((offset, end));
            out.insert(name, entry);
        }
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[0].1 > w[1].0) {
            return Err(Error::Format("overlapping entry payloads".into()));
        }
        if let Some(&(first, _)) = spans.first() {
            if first < r.pos {
                return Err(Error::Format("payload overlaps header".into()));
            }
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn check_len(name: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Format(format!("entry `{name}`: {got} bytes, expected {want}")));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let s = &self.bytes[self.pos..end];
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
