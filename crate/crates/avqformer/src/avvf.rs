//! Raw frame-sequence files: `"AVVF"`, then little-endian `u32` version,
//! N, H, W, C, then `N·H·W·C` little-endian `f32` pixels.

use std::path::Path;

use avqf_core::encoders::FrameTensor;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AVVF";
pub const VERSION: u32 = 1;

pub fn encode(frames: &[FrameTensor]) -> Result<Vec<u8>> {
    let first = frames.first().ok_or_else(|| Error::Dataset("cannot write an empty frame sequence".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut out = Vec::with_capacity(24 + frames.len() * h * w * c * 4);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, frames.len() as u32, h as u32, w as u32, c as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for f in frames {
        if (f.height, f.width, f.channels) != (h, w, c) {
            return Err(Error::Dataset("frames differ in size".into()));
        }
        for p in &f.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<FrameTensor>> {
    if bytes.len() < 24 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "not an AVVF file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (version, n, h, w, c) = (word(0), word(1), word(2), word(3), word(4));
    if version != VERSION as usize {
        return Err(Error::format(path, format!("unsupported AVVF version {version}")));
    }
    let per = h * w * c;
    if n == 0 || per == 0 || bytes.len() != 24 + n * per * 4 {
        return Err(Error::format(path, format!("payload does not match {n}×{h}×{w}×{c}")));
    }
    bytes[24..]
        .chunks_exact(per * 4)
        .enumerate()
        .map(|(i, chunk)| {
            let px = chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            Ok(FrameTensor::new(px, h, w, c, i)?)
        })
        .collect()
}

pub fn save(path: impl AsRef<Path>, frames: &[FrameTensor]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(frames)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<FrameTensor>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
