//! Tensor record serialization.
//!
//! A blob is a plain concatenation of records:
//! `name_len: u32, name: [u8], dtype: u8 (0 = f32), rank: u32,
//! dims: [u32; rank], data: [f32 LE]`.

use std::io::{Read, Write};

use super::ParamStore;
use crate::error::{Error, Result};

pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(13 + self.name.len() + 4 * (self.shape.len() + self.data.len()));
        buf.extend_from_slice(&(self.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(self.name.as_bytes());
        buf.push(DTYPE_F32);
        buf.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }
}

pub fn write_records<W: Write>(w: &mut W, records: &[TensorRecord]) -> std::io::Result<()> {
    for r in records {
        w.write_all(&r.encode())?;
    }
    Ok(())
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Corrupt { what: "tensor blob".into(), detail: detail.into() }
}

/// Parses every record in `bytes`; trailing garbage is an error.
pub fn read_records(mut bytes: &[u8]) -> Result<Vec<TensorRecord>> {
    fn take<'a>(b: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
        if b.len() < n {
            return Err(corrupt(format!("truncated while reading {what}")));
        }
        let (head, tail) = b.split_at(n);
        *b = tail;
        Ok(head)
    }
    fn u32_at(b: &mut &[u8], what: &str) -> Result<usize> {
        let mut w = [0u8; 4];
        take(b, 4, what)?.read_exact(&mut w).expect("4 bytes");
        Ok(u32::from_le_bytes(w) as usize)
    }
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let n = u32_at(&mut bytes, "name length")?;
        let name = String::from_utf8(take(&mut bytes, n, "name")?.to_vec()).map_err(|_| corrupt("name is not UTF-8"))?;
        let dtype = take(&mut bytes, 1, "dtype")?[0];
        if dtype != DTYPE_F32 {
            return Err(corrupt(format!("{name}: unsupported dtype {dtype}")));
        }
        let rank = u32_at(&mut bytes, "rank")?;
        let shape = (0..rank).map(|_| u32_at(&mut bytes, "dims")).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = take(&mut bytes, numel * 4, &format!("data of {name}"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk"))).collect();
        out.push(TensorRecord { name, shape, data });
    }
    Ok(out)
}

impl ParamStore<f32> {
    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.iter().map(|p| TensorRecord { name: p.name.clone(), shape: p.shape.clone(), data: p.value.clone() }).collect()
    }

    /// A store holding the given records, in order.
    pub fn from_records(records: Vec<TensorRecord>) -> Result<Self> {
        let mut store = ParamStore::new();
        for r in records {
            store.add(r.name, &r.shape, r.data)?;
        }
        Ok(store)
    }
}
