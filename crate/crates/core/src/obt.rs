//! OBT tensor container: magic `OBT1`, little-endian u32 entry count, then per
//! entry a u16-prefixed UTF-8 name, a dtype byte, a u8 rank, u64 dims and raw
//! row-major little-endian data.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"OBT1";
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
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

    pub fn dtype(&self) -> u8 {
        match self {
            TensorData::F32(_) => DTYPE_F32,
            TensorData::F64(_) => DTYPE_F64,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObtEntry {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl ObtEntry {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: TensorData) -> Result<Self> {
        let name = name.into();
        let n: u64 = dims.iter().product();
        if n != data.len() as u64 {
            return Err(Error::DimMismatch(format!("{name}: dims {dims:?} vs {} values", data.len())));
        }
        if dims.len() > u8::MAX as usize || name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("entry {name:?} too large for the header")));
        }
        Ok(Self { name, dims, data })
    }

    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            dims: vec![t.rows as u64, t.cols as u64],
            data: TensorData::F64(t.data.clone()),
        }
    }

    /// Rank-1 entries become row vectors; higher ranks fold into the last dim.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.to_f64();
        let cols = self.dims.last().copied().unwrap_or(1) as usize;
        let rows = if cols == 0 { 0 } else { data.len() / cols };
        Tensor::new(rows, cols, data)
    }
}

/// Ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Obt {
    entries: Vec<ObtEntry>,
}

impl Obt {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, e: ObtEntry) -> Result<()> {
        if self.get(&e.name).is_some() {
            return Err(Error::DuplicateName(e.name));
        }
        self.entries.push(e);
        Ok(())
    }

    pub fn entries(&self) -> &[ObtEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ObtEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&ObtEntry> {
        self.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            entries: store.iter().map(|(k, t)| ObtEntry::from_tensor(k.clone(), t)).collect(),
        }
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for e in &self.entries {
            s.insert(e.name.clone(), e.to_tensor());
        }
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.dtype());
            out.push(e.dims.len() as u8);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &e.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::BadMagic);
        }
        let count = u32::from_le_bytes(r.array("entry count")?);
        let mut names = BTreeSet::new();
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array("name length")?) as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(Error::DuplicateName(name));
            }
            let dtype = r.take(1, "dtype")?[0];
            let width = match dtype {
                DTYPE_F32 => 4,
                DTYPE_F64 => 8,
                d => return Err(Error::UnknownDtype(d)),
            };
            let ndim = r.take(1, "rank")?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u64::from_le_bytes(r.array("dims")?));
            }
            let n = dims
                .iter()
                .try_fold(1u64, |a, &d| a.checked_mul(d))
                .and_then(|n| usize::try_from(n).ok())
                .ok_or_else(|| Error::Format(format!("dims of {name:?} overflow")))?;
            let nbytes = n
                .checked_mul(width)
                .ok_or_else(|| Error::Format(format!("dims of {name:?} overflow")))?;
            let raw = r.take(nbytes, &name)?;
            let data = if dtype == DTYPE_F32 {
                TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            } else {
                TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
            };
            entries.push(ObtEntry { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::TruncatedFile(format!("reading {what} at byte {}", self.pos))),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }
}
