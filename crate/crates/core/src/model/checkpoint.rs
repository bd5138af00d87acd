//! Binary checkpoint format.
//!
//! ```text
//! "WCAP" | version u32 | entry count u32 |
//!   per entry: name length u32 | UTF-8 name | rank u32 | extents u64 × rank | values f32 × Π extents
//! ```
//! All integers and floats are little-endian. Text metadata is stored as
//! entries named `meta:<key>` holding one byte per value.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{build_network, Model, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WCAP";
pub const CHECKPOINT_VERSION: u32 = 1;
const META_PREFIX: &str = "meta:";
const NETWORK_KEY: &str = "network";

/// Decoded checkpoint contents in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: BTreeMap<String, String>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

pub fn encode_checkpoint(tensors: &[(&str, &Tensor<f32>)], meta: &BTreeMap<String, String>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&((tensors.len() + meta.len()) as u32).to_le_bytes());
    let mut entry = |name: &str, shape: &[usize], values: &mut dyn Iterator<Item = f32>| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, t) in tensors {
        entry(name, t.shape(), &mut t.data().iter().copied());
    }
    for (k, v) in meta {
        entry(&format!("{META_PREFIX}{k}"), &[v.len()], &mut v.bytes().map(f32::from));
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::new();
    let mut meta = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("entry name is not UTF-8"))?.to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(corrupt(format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| corrupt("extent overflow"))?);
        }
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| corrupt("size overflow"))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| corrupt("size overflow"))?)?;
        let values: Vec<f32> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if let Some(key) = name.strip_prefix(META_PREFIX) {
            let text: Vec<u8> = values.iter().map(|&v| v as u8).collect();
            let text = String::from_utf8(text).map_err(|_| corrupt("metadata is not UTF-8"))?;
            meta.insert(key.to_string(), text);
        } else {
            let t = Tensor::new(&shape, values).map_err(|e| corrupt(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
    }
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(Checkpoint { tensors, meta })
}

/// Writes the model's parameters, buffers and network description.
pub fn save_checkpoint(path: &Path, model: &Model<f32>, extra_meta: &[(&str, &str)]) -> Result<()> {
    let mut meta: BTreeMap<String, String> = extra_meta.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    meta.insert(NETWORK_KEY.into(), model.spec().to_kv());
    let bytes = encode_checkpoint(&model.store.named_tensors(), &meta);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Rebuilds the model described by a checkpoint and restores every tensor.
pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, Checkpoint)> {
    let bytes = fs::read(path)?;
    let ck = decode_checkpoint(&bytes)?;
    let text = ck.meta.get(NETWORK_KEY).ok_or_else(|| corrupt("no network description"))?;
    let spec = NetworkSpec::from_kv(text).map_err(|e| corrupt(format!("network description: {e}")))?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut model: Model<f32> = build_network(&spec, &mut rng)?;
    let expected = model.store.named_tensors().len();
    if ck.tensors.len() != expected {
        return Err(corrupt(format!("{} tensors for a network with {expected}", ck.tensors.len())));
    }
    for (name, t) in &ck.tensors {
        model.store.set(name, t.clone()).map_err(|e| corrupt(e.to_string()))?;
    }
    Ok((model, ck))
}
