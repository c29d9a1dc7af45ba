//! Little-endian named-tensor container.
//!
//! Layout: 5-byte magic, `u32` entry count, then per entry `u32` name length,
//! UTF-8 name, `u32` rank, `u32` dims, `f32` data; then `u32` metadata length
//! and a UTF-8 JSON object. Entries are written in name order.

use std::collections::BTreeMap;

use forge_autodiff::Tensor;
use serde_json::Value;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 5] = *b"PSPT1";
pub const PASSPORT_MAGIC: [u8; 5] = *b"PSPP1";
pub const WATERMARK_KEY_MAGIC: [u8; 5] = *b"WMKY1";

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: Value,
}

impl Archive {
    pub fn new(tensors: BTreeMap<String, Tensor>, meta: Value) -> Self {
        Archive { tensors, meta }
    }

    pub fn to_bytes(&self, magic: [u8; 5]) -> Vec<u8> {
        let mut out = magic.to_vec();
        push_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            push_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            push_u32(&mut out, t.rank());
            for &d in t.shape() {
                push_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.meta).expect("json value serializes");
        push_u32(&mut out, meta.len());
        out.extend_from_slice(&meta);
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: [u8; 5]) -> Result<Self> {
        let what = kind(magic);
        let mut r = Reader { bytes, pos: 0, what };
        let head = r.take(5)?;
        if head != magic {
            return Err(Error::format(what, format!("bad magic {:?}", String::from_utf8_lossy(head))));
        }
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(what, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()?;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32()?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::format(what, format!("implausible shape {shape:?} for `{name}`")))?;
            let raw = r.take(numel * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(what, format!("`{name}`: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::format(what, format!("duplicate tensor `{name}`")));
            }
        }
        let len = r.u32()?;
        let meta: Value = serde_json::from_slice(r.take(len)?)?;
        if !meta.is_object() {
            return Err(Error::format(what, "metadata is not a JSON object"));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(what, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Archive { tensors, meta })
    }
}

fn kind(magic: [u8; 5]) -> &'static str {
    match &magic {
        b"PSPT1" => "checkpoint",
        b"PSPP1" => "passport file",
        b"WMKY1" => "watermark key",
        _ => "archive",
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("archive field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(self.what, format!("truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}
