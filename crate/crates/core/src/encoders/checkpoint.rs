//! Named-tensor checkpoints.
//!
//! ```text
//! magic "VLCK" | version u32
//! | meta count u32 | (key len u32, key, value len u32, value)*
//! | section count u32 | (name len u32, name, rank u32, dims rank x u32, data x f64)*
//! ```
//!
//! All integers and floats are little-endian. The metadata block carries the
//! config fingerprint and the hashes of upstream artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::datasynth::io::Reader;
use crate::error::{Error, Result};
use crate::hashing::{sha256, Hash32};
use crate::numcore::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut Reader) -> Result<String> {
    let n = r.u32()? as usize;
    String::from_utf8(r.bytes(n)?.to_vec())
        .map_err(|_| Error::format("checkpoint", "name is not UTF-8"))
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        let mut t = t.clone();
        t.grad = None;
        t.requires_grad = false;
        self.tensors.push((name.into(), t));
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format("checkpoint", format!("missing section `{name}`")))
    }

    /// Loads a section, checking its shape.
    pub fn take(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(Error::shape("checkpoint section", t.shape(), shape));
        }
        Ok(t.clone())
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n.starts_with(prefix))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "checkpoint");
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("unsupported version {version}"),
            ));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = get_str(&mut r)?;
            let v = get_str(&mut r)?;
            meta.insert(k, v);
        }
        let mut tensors = Vec::new();
        for _ in 0..r.u32()? {
            let name = get_str(&mut r)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        r.finish()?;
        Ok(Checkpoint { meta, tensors })
    }

    pub fn hash(&self) -> Hash32 {
        sha256(&self.encode())
    }

    pub fn write(&self, path: &Path) -> Result<Hash32> {
        let bytes = self.encode();
        fs::write(path, &bytes)?;
        Ok(sha256(&bytes))
    }

    pub fn read(path: &Path) -> Result<(Self, Hash32)> {
        let bytes =
            fs::read(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
        Ok((Self::decode(&bytes)?, sha256(&bytes)))
    }
}
