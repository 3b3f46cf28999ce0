//! On-disk formats: volumes, gradient tables, streamlines, checkpoints and
//! PNG figure panels. Byte layouts are documented in `docs/formats.md`.

pub mod checkpoint;
pub mod image;
pub mod scheme;
pub mod streamlines;
pub mod volume;

use std::path::Path;

use crate::error::{Error, Result};

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use image::{render_color_slice, render_error_slice, render_scalar_slice, write_png, Image, Window};
pub use scheme::{read_fsl, write_fsl};
pub use streamlines::{StreamlineFile, STREAMLINE_MAGIC, STREAMLINE_VERSION};
pub use volume::{Semantics, VolumeFile, VolumeHeader, VOLUME_MAGIC, VOLUME_VERSION};

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// JSON syntax or schema error as a parse error at the failing byte.
pub(crate) fn json_error(path: &Path, text: &[u8], e: &serde_json::Error) -> Error {
    let line_start: usize = text
        .split_inclusive(|&b| b == b'\n')
        .take(e.line().saturating_sub(1))
        .map(|l| l.len())
        .sum();
    let offset = (line_start + e.column().saturating_sub(1)).min(text.len());
    Error::parse(path, offset as u64, e.to_string())
}

/// Little-endian cursor over a byte buffer; every read reports the offset it
/// failed at.
pub(crate) struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Reader { path, bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::parse(
                self.path,
                self.pos as u64,
                format!(
                    "truncated {what}: expected {n} bytes, found {}",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f64_into(&mut self, out: &mut [f64], what: &str) -> Result<()> {
        let b = self.take(out.len() * 8, what)?;
        for (o, c) in out.iter_mut().zip(b.chunks_exact(8)) {
            *o = f64::from_le_bytes(c.try_into().expect("chunk of 8"));
        }
        Ok(())
    }

    pub fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let at = self.pos as u64;
        let got = self.take(4, "magic")?;
        if got != want {
            return Err(Error::parse(
                self.path,
                at,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(want)
                ),
            ));
        }
        Ok(())
    }

    pub fn version(&mut self, want: u32) -> Result<()> {
        let at = self.pos as u64;
        let v = self.u32("version")?;
        if v != want {
            return Err(Error::parse(self.path, at, format!("unsupported version {v}, expected {want}")));
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::parse(
                self.path,
                self.pos as u64,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}
