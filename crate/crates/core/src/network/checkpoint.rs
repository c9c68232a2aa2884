//! Binary checkpoint: `SRCX`, u32 version, length-prefixed JSON config,
//! tensor records `(name, dtype, shape, f32 LE data)`, then CRC32 of every
//! preceding byte. All integers little-endian u32; dtype 0 is f32.

use std::collections::HashMap;
use std::path::Path;

use super::{NetConfig, NetParams, Real};
use crate::error::{Result, SrusError};
use crate::formats::write_bytes;

const MAGIC: &[u8; 4] = b"SRCX";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize parameters. Values are stored as f32 regardless of `F`.
pub fn encode_checkpoint<F: Real>(p: &NetParams<F>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    let cfg = serde_json::to_vec(&p.cfg).expect("config serializes");
    put_u32(&mut buf, cfg.len() as u32);
    buf.extend_from_slice(&cfg);
    let tensors = p.tensors();
    put_u32(&mut buf, tensors.len() as u32);
    for (name, _, t) in tensors {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F32);
        put_u32(&mut buf, t.ndim() as u32);
        for &d in t.shape() {
            put_u32(&mut buf, d as u32);
        }
        for v in t.iter() {
            buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(SrusError::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<NetParams<f32>> {
    let bad = |msg: String| SrusError::format(path, msg);
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(bad("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 4, path };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()? as usize;
    let cfg: NetConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| bad(format!("config: {e}")))?;
    cfg.validate().map_err(|e| bad(e.to_string()))?;

    let count = r.u32()? as usize;
    let mut records: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| bad("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(bad(format!("{name}: unsupported dtype {dtype}")));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| bad("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        records.insert(name, (shape, data));
    }
    if r.pos != body.len() {
        return Err(bad("trailing bytes after tensors".into()));
    }

    let mut params = NetParams::<f32>::zeros(&cfg)?;
    for (name, _, mut t) in params.tensors_mut() {
        let (shape, data) = records
            .remove(&name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if shape != t.shape() {
            return Err(bad(format!("{name}: shape {shape:?}, expected {:?}", t.shape())));
        }
        for (dst, src) in t.iter_mut().zip(data) {
            *dst = src;
        }
    }
    if let Some(extra) = records.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    params.validate().map_err(|e| bad(e.to_string()))?;
    Ok(params)
}

pub fn save_checkpoint<F: Real>(path: &Path, p: &NetParams<F>) -> Result<()> {
    write_bytes(path, &encode_checkpoint(p))
}

pub fn load_checkpoint(path: &Path) -> Result<NetParams<f32>> {
    let bytes = std::fs::read(path).map_err(|e| SrusError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
