//! Versioned little-endian checkpoint format.
//!
//! Layout: `b"SNDC"`, u32 version, u32 length + UTF-8 TOML model config,
//! u32 tensor count, then per tensor u32 rank, u32 extents and f32 values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::network::Network;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SNDC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes a network; parameters are stored as f32.
pub fn encode<T: Scalar>(net: &Network<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = net.config().to_toml()?;
    put_u32(&mut out, cfg.len())?;
    out.extend_from_slice(cfg.as_bytes());
    let params = net.params();
    put_u32(&mut out, params.len())?;
    for p in params {
        put_u32(&mut out, p.rank())?;
        for &d in p.shape() {
            put_u32(&mut out, d)?;
        }
        for &v in p.data() {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Reads the stored config without materializing parameters.
pub fn decode_config(bytes: &[u8]) -> Result<ModelConfig> {
    let mut c = Cursor { bytes, pos: 0 };
    header(&mut c)
}

fn header(c: &mut Cursor<'_>) -> Result<ModelConfig> {
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = c.u32()?;
    let text = std::str::from_utf8(c.take(len)?).map_err(|e| Error::Format(format!("config is not UTF-8: {e}")))?;
    ModelConfig::from_toml(text)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Network<T>> {
    let mut c = Cursor { bytes, pos: 0 };
    let cfg = header(&mut c)?;
    let count = c.u32()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::from_f32(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        tensors.push(Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let mut net = Network::build(&cfg, 0)?;
    net.set_params(tensors).map_err(|e| Error::Format(format!("parameters do not match config: {e}")))?;
    Ok(net)
}

pub fn save<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    let bytes = encode(net)?;
    let mut f = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    f.write_all(&bytes).map_err(Error::Write)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Network<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::file(path, e))?;
    decode(&bytes)
}
