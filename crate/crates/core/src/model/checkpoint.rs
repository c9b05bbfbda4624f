//! Binary named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LCGC" | u32 version | u32 count
//! count × ( u32 name_len | name bytes | u32 ndim | ndim × u32 | numel × f64 )
//! u32 meta_len | meta bytes (UTF-8 JSON)
//! u32 state_len | state bytes (opaque training state, 0 = none)
//! ```

use std::io::{Read, Write};

use super::{ModelError, ParamStore, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LCGC";
pub const VERSION: u32 = 1;

/// Decoded contents of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: String,
    pub state: Vec<u8>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: String, state: Vec<u8>) -> Self {
        Self {
            tensors: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            meta,
            state,
        }
    }

    pub fn into_store(self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, t) in self.tensors {
            store.add(name, t);
        }
        store
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&u32_len(self.tensors.len())?.to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&u32_len(name.len())?.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&u32_len(t.shape().len())?.to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&u32_len(d)?.to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&u32_len(self.meta.len())?.to_le_bytes())?;
        w.write_all(self.meta.as_bytes())?;
        w.write_all(&u32_len(self.state.len())?.to_le_bytes())?;
        w.write_all(&self.state)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ModelError::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for i in 0..count {
            let name = read_string(r)?;
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut bytes = vec![0u8; numel * 8];
            r.read_exact(&mut bytes)?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| ModelError::Checkpoint(format!("tensor {i} ({name}): {e}")))?;
            tensors.push((name, t));
        }
        let meta = read_string(r)?;
        let state_len = read_u32(r)? as usize;
        let mut state = vec![0u8; state_len];
        r.read_exact(&mut state)?;
        Ok(Self { tensors, meta, state })
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| ModelError::Checkpoint(format!("length {n} exceeds u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| ModelError::Checkpoint(format!("invalid UTF-8: {e}")))
}
