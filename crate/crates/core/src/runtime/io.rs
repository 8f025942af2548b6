//! Binary feature files and score dumps, little-endian.
//!
//! Feature file: `b"FBNK"`, u32 frame count, u32 dim (40), f32 frames row-major.
//! Score dump: per frame u32 frame index, u32 count, then (u32 unit, f32 score) pairs.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::FEATURE_DIM;
use crate::runtime::frames::FrameStream;
use crate::runtime::pipeline::FrameScores;
use crate::tensor::{Scalar, Tensor};

pub const FEATURE_MAGIC: [u8; 4] = *b"FBNK";

fn u32_of(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    let b = bytes
        .get(*pos..*pos + 4)
        .ok_or_else(|| Error::Format(format!("unexpected end of data at byte {pos}")))?;
    *pos += 4;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_f32(bytes: &[u8], pos: &mut usize) -> Result<f32> {
    read_u32(bytes, pos).map(f32::from_bits)
}

pub fn encode_features<T: Scalar>(stream: &FrameStream<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 4 * stream.frames().len());
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&u32_of(stream.len(), "frame count")?);
    out.extend_from_slice(&u32_of(FEATURE_DIM, "dim")?);
    for &v in stream.frames().data() {
        out.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features<T: Scalar>(bytes: &[u8]) -> Result<FrameStream<T>> {
    if bytes.get(..4) != Some(&FEATURE_MAGIC[..]) {
        return Err(Error::Format("not a feature file (bad magic)".into()));
    }
    let mut pos = 4;
    let frames = read_u32(bytes, &mut pos)? as usize;
    let dim = read_u32(bytes, &mut pos)? as usize;
    if dim != FEATURE_DIM {
        return Err(Error::Format(format!("feature dim must be {FEATURE_DIM}, got {dim}")));
    }
    if frames == 0 {
        return Err(Error::Format("feature file has no frames".into()));
    }
    let expected = 12 + 4 * frames * dim;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "feature file is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let data = (0..frames * dim)
        .map(|_| read_f32(bytes, &mut pos).map(T::from_f32))
        .collect::<Result<Vec<T>>>()?;
    FrameStream::new(Tensor::new(vec![frames, dim], data)?)
}

pub fn write_features<T: Scalar>(stream: &FrameStream<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_features(stream)?).map_err(|e| Error::file(path, e))
}

pub fn read_features<T: Scalar>(path: &Path) -> Result<FrameStream<T>> {
    decode_features(&fs::read(path).map_err(|e| Error::file(path, e))?)
}

pub fn write_scores<T: Scalar, W: Write>(frames: &[FrameScores<T>], mut out: W) -> Result<()> {
    let mut buf = Vec::new();
    for f in frames {
        buf.extend_from_slice(&u32_of(f.frame, "frame index")?);
        buf.extend_from_slice(&u32_of(f.scores.len(), "score count")?);
        for &(j, s) in &f.scores {
            buf.extend_from_slice(&u32_of(j, "unit index")?);
            buf.extend_from_slice(&s.as_f32().to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(Error::Write)?;
    out.flush().map_err(Error::Write)
}

pub fn read_scores(bytes: &[u8]) -> Result<Vec<FrameScores<f32>>> {
    let mut pos = 0;
    let mut frames = Vec::new();
    while pos < bytes.len() {
        let frame = read_u32(bytes, &mut pos)? as usize;
        let count = read_u32(bytes, &mut pos)? as usize;
        let scores = (0..count)
            .map(|_| Ok((read_u32(bytes, &mut pos)? as usize, read_f32(bytes, &mut pos)?)))
            .collect::<Result<Vec<_>>>()?;
        frames.push(FrameScores { frame, scores });
    }
    Ok(frames)
}
