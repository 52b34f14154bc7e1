//! Named-tensor checkpoint container.
//!
//! Little-endian layout: `"AVQF"`, `u32` version, `u64` entry count, then
//! per entry a `u32`-length UTF-8 name, `u32` rank, `u64` extents, `u8`
//! dtype code, `u8` frozen flag and the row-major `f32` data. A metadata
//! block follows: `u32` pair count, then `u32`-length UTF-8 keys and values.

use std::collections::BTreeMap;
use std::path::Path;

use avqf_core::params::ParamStore;
use avqf_core::{DType, Tensor};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AVQF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub data: Vec<f32>,
}

impl Entry {
    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        Ok(Tensor::from_vec(&self.shape, self.data.clone())?)
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.name.len() as u32).to_le_bytes());
        out.extend_from_slice(self.name.as_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(DType::F32 as u8);
        out.push(u8::from(self.frozen));
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// The entry's serialized bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointBundle {
    pub entries: Vec<Entry>,
    pub metadata: BTreeMap<String, String>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(self.path, "name is not UTF-8"))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl CheckpointBundle {
    /// Snapshot of every parameter, with frozen flags taken from the store.
    pub fn from_store(store: &ParamStore<f32>) -> Self {
        let entries = store
            .iter()
            .map(|(_, name, t)| Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                frozen: !t.requires_grad(),
                data: t.data().to_vec(),
            })
            .collect();
        Self { entries, metadata: BTreeMap::new() }
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    /// Copies values into `store`. The two must hold exactly the same
    /// names and shapes.
    pub fn apply_to(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.entries.len() != store.len() {
            return Err(Error::Schema(format!(
                "checkpoint has {} entries, model has {} parameters",
                self.entries.len(),
                store.len()
            )));
        }
        for e in &self.entries {
            let id = store.id(&e.name)?;
            let t = store.get_mut(id);
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Schema(format!("{}: checkpoint shape {:?}, model shape {:?}", e.name, e.shape, t.shape())));
            }
            t.data_mut().copy_from_slice(&e.data);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            e.write(&mut out);
        }
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not an AVQF checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let count = r.u64()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let dtype = r.u8()?;
            if dtype != DType::F32 as u8 {
                return Err(Error::format(path, format!("{name}: unsupported dtype code {dtype}")));
            }
            let frozen = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(Error::format(path, format!("{name}: bad frozen flag {b}"))),
            };
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.filter(|&n| n > 0 && shape.iter().all(|&d| d > 0));
            let n = n.ok_or_else(|| Error::format(path, format!("{name}: invalid shape {shape:?}")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format(path, "entry too large"))?)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            entries.push(Entry { name, shape, frozen, data });
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after metadata"));
        }
        Ok(Self { entries, metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
