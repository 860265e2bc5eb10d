//! Binary parameter snapshots.
//!
//! Layout, little-endian: magic `MXMNCKPT`, `u32` version, `u32` length and
//! JSON bytes of the [`NetConfig`], `u32` tensor count, then per tensor a
//! `u32`-prefixed name, `u32` rank, `u64` dims and raw `f64` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::{ModelParams, NetConfig, PARAM_NAMES};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MXMNCKPT";
pub const VERSION: u32 = 1;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(params.config()).expect("plain struct");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.named() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    record: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::corrupt(self.record, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
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

pub fn decode(bytes: &[u8], record: &str) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0, record };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::corrupt(record, "not a checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::corrupt(record, format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let config: NetConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::corrupt(record, format!("bad network config: {e}")))?;
    let count = r.u32()? as usize;
    if count != PARAM_NAMES.len() {
        return Err(Error::corrupt(record, format!("expected {} tensors, found {count}", PARAM_NAMES.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for expected in PARAM_NAMES {
        let len = r.u32()? as usize;
        let name = r.take(len)?;
        if name != expected.as_bytes() {
            return Err(Error::corrupt(
                record,
                format!("expected tensor `{expected}`, found `{}`", String::from_utf8_lossy(name)),
            ));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::corrupt(record, "tensor size overflows"))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::corrupt(record, "tensor size overflows"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::corrupt(record, "trailing bytes after checkpoint"));
    }
    ModelParams::from_tensors(config, tensors).map_err(|e| Error::corrupt(record, e.to_string()))
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}
