//! Per-layer frame stacks and their on-disk container.
//!
//! One file per layer: a fixed little-endian header followed by the frames
//! as contiguous row-major `u16` counts.
//!
//! ```text
//! magic "IRFS" | version u32 | layer u32 | width u32 | height u32
//! | frame_count u32 | fps f64 | recoat_boundary u32 | frames...
//! ```

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imageops::Grid;

pub const FRAME_MAGIC: &[u8; 4] = b"IRFS";
pub const FRAME_VERSION: u32 = 1;
pub const DEFAULT_FPS: f64 = 30.0;
const HEADER_LEN: usize = 36;

/// Ordered, perspective-corrected radiometric frames of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub layer: usize,
    pub fps: f64,
    /// Frame index at which recording began after the recoat.
    pub recoat_boundary: usize,
    pub frames: Vec<Grid<u16>>,
}

impl LayerStack {
    pub fn new(layer: usize, fps: f64, frames: Vec<Grid<u16>>) -> Result<Self> {
        let stack = LayerStack {
            layer,
            fps,
            recoat_boundary: 0,
            frames,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.frames.first() else {
            return Err(Error::Parameter(format!("layer {} has no frames", self.layer)));
        };
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Parameter(format!("frame rate must be positive, got {}", self.fps)));
        }
        for f in &self.frames[1..] {
            first.ensure_same_dims(f)?;
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Size of the frames as raw 16-bit counts.
    pub fn raw_bytes(&self) -> u64 {
        let (w, h) = self.dims();
        (w * h * 2 * self.frames.len()) as u64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (w, h) = self.dims();
        let mut out = Vec::with_capacity(HEADER_LEN + self.raw_bytes() as usize);
        out.extend_from_slice(FRAME_MAGIC);
        for v in [FRAME_VERSION, self.layer as u32, w as u32, h as u32, self.frames.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.fps.to_le_bytes());
        out.extend_from_slice(&(self.recoat_boundary as u32).to_le_bytes());
        for f in &self.frames {
            for &c in f.values() {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = bytes.get(..HEADER_LEN).ok_or_else(|| Error::Corrupt {
            offset: bytes.len(),
            message: "frame stack header truncated".into(),
        })?;
        let (layer, w, h, n, fps, recoat) = parse_header(header)?;
        let frame_len = w * h * 2;
        let expected = frame_len.checked_mul(n).and_then(|b| b.checked_add(HEADER_LEN));
        if expected != Some(bytes.len()) {
            return Err(Error::Corrupt {
                offset: bytes.len(),
                message: format!("{n} frames of {w}x{h} declared, file holds {} bytes", bytes.len()),
            });
        }
        let frames = bytes[HEADER_LEN..]
            .chunks_exact(frame_len)
            .map(|chunk| {
                let data = chunk.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
                Grid::from_vec(w, h, data)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut stack = LayerStack::new(layer, fps, frames)?;
        stack.recoat_boundary = recoat;
        Ok(stack)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

type Header = (usize, usize, usize, usize, f64, usize);

fn parse_header(h: &[u8]) -> Result<Header> {
    if &h[0..4] != FRAME_MAGIC {
        return Err(Error::Format("not a frame stack file (bad magic)".into()));
    }
    let u = |i: usize| u32::from_le_bytes(h[i..i + 4].try_into().unwrap()) as usize;
    let version = u(4) as u32;
    if version != FRAME_VERSION {
        return Err(Error::Format(format!("unsupported frame stack version {version}")));
    }
    let fps = f64::from_le_bytes(h[24..32].try_into().unwrap());
    Ok((u(8), u(12), u(16), u(20), fps, u(32)))
}

/// Container file name for a layer inside a frames directory.
pub fn layer_file_name(layer: usize) -> String {
    format!("layer_{layer:05}.irfs")
}

pub fn layer_path(dir: &Path, layer: usize) -> PathBuf {
    dir.join(layer_file_name(layer))
}

/// Layers present in a frames directory, ascending.
pub fn list_layers(dir: &Path) -> Result<Vec<usize>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(n) = name.strip_prefix("layer_").and_then(|s| s.strip_suffix(".irfs")) {
            if let Ok(layer) = n.parse() {
                layers.push(layer);
            }
        }
    }
    layers.sort_unstable();
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LayerStack {
        let frames = (0..3)
            .map(|k| Grid::from_fn(4, 3, |x, y| (k * 100 + y * 4 + x) as u16).unwrap())
            .collect();
        let mut s = LayerStack::new(7, 30.0, frames).unwrap();
        s.recoat_boundary = 2;
        s
    }

    #[test]
    fn bytes_round_trip() {
        let s = sample();
        let b = s.to_bytes();
        assert_eq!(b.len(), HEADER_LEN + 3 * 4 * 3 * 2);
        assert_eq!(LayerStack::from_bytes(&b).unwrap(), s);
    }

    #[test]
    fn truncation_and_magic_detected() {
        let b = sample().to_bytes();
        assert!(matches!(
            LayerStack::from_bytes(&b[..b.len() - 1]),
            Err(Error::Corrupt { .. })
        ));
        assert!(matches!(LayerStack::from_bytes(&b[..10]), Err(Error::Corrupt { .. })));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(LayerStack::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn directory_listing() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = sample();
        for layer in [3, 0, 12] {
            s.layer = layer;
            s.write(&layer_path(dir.path(), layer)).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        assert_eq!(list_layers(dir.path()).unwrap(), vec![0, 3, 12]);
        assert_eq!(LayerStack::read(&layer_path(dir.path(), 12)).unwrap().layer, 12);
    }

    #[test]
    fn mixed_dims_rejected() {
        let frames = vec![Grid::filled(2, 2, 0u16).unwrap(), Grid::filled(3, 2, 0u16).unwrap()];
        assert!(LayerStack::new(0, 30.0, frames).is_err());
    }
}
