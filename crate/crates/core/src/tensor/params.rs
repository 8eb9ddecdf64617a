use rand::Rng;

use super::{Dims, Tensor};
use crate::error::{Error, Result};

/// Named parameters in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some((_, t)) => *t = value,
            None => self.entries.push((name, value)),
        }
    }

    /// Glorot-uniform initialization: `U(-s, s)` with
    /// `s = sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        dims: Dims,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::from_fn(dims, |_| rng.gen_range(-s..s));
        self.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"BFNCKPT1";
const MAX_NAME_LEN: usize = 4096;

/// Checkpoint layout (little-endian): magic `BFNCKPT1`, `u32` entry count,
/// then per entry a `u32` name length, UTF-8 name, four `u32` dims and the
/// row-major `f64` payload.
pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let count = cur.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = cur.u32()? as usize;
        if len > MAX_NAME_LEN {
            return Err(Error::format("checkpoint", format!("name length {len}")));
        }
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::format("checkpoint", "parameter name is not UTF-8"))?
            .to_string();
        if store.get(&name).is_some() {
            return Err(Error::format("checkpoint", format!("duplicate parameter `{name}`")));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = cur.u32()? as usize;
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n.checked_mul(8).is_some_and(|b| b <= cur.remaining()))
            .ok_or_else(|| Error::format("checkpoint", format!("bad dims {dims:?} for `{name}`")))?;
        let payload = cur.take(n * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("checkpoint", format!("non-finite value in `{name}`")));
        }
        store.insert(name, Tensor::from_vec(dims, data)?);
    }
    if cur.remaining() != 0 {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    Ok(store)
}
