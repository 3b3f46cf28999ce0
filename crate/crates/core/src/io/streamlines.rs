//! Binary streamline sets ("SDTS") plus a plain-text export.

use std::fmt::Write as _;
use std::path::Path;

use super::{read_bytes, write_bytes, Reader};
use crate::error::{Error, Result};
use crate::tractography::Streamline;
use crate::volume::Spacing;

pub const STREAMLINE_MAGIC: &[u8; 4] = b"SDTS";
pub const STREAMLINE_VERSION: u32 = 1;

/// Streamlines as stored: points in mm, f32.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamlineFile {
    pub spacing: [f32; 3],
    pub lines: Vec<Vec<[f32; 3]>>,
}

impl StreamlineFile {
    pub fn from_streamlines(streamlines: &[Streamline], spacing: Spacing) -> Self {
        StreamlineFile {
            spacing: spacing.map(|v| v as f32),
            lines: streamlines
                .iter()
                .map(|s| s.points.iter().map(|p| p.map(|v| v as f32)).collect())
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let count = |n: usize, what: &str| {
            u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} {n} exceeds u32")))
        };
        let points: usize = self.lines.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(24 + 4 * self.lines.len() + 12 * points);
        out.extend_from_slice(STREAMLINE_MAGIC);
        out.extend_from_slice(&STREAMLINE_VERSION.to_le_bytes());
        out.extend_from_slice(&count(self.lines.len(), "streamline count")?.to_le_bytes());
        for v in self.spacing {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for line in &self.lines {
            out.extend_from_slice(&count(line.len(), "point count")?.to_le_bytes());
            for p in line {
                for v in p {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        r.magic(STREAMLINE_MAGIC)?;
        r.version(STREAMLINE_VERSION)?;
        let n = r.u32("streamline count")? as usize;
        let spacing = [r.f32("spacing")?, r.f32("spacing")?, r.f32("spacing")?];
        if spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::parse(path, 12, format!("invalid spacing {spacing:?}")));
        }
        let mut lines = Vec::with_capacity(n.min(bytes.len() / 4));
        for _ in 0..n {
            let m = r.u32("point count")? as usize;
            let raw = r.take(m.saturating_mul(12), "points")?;
            let pts = raw
                .chunks_exact(12)
                .map(|c| {
                    let f = |k: usize| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().expect("4 bytes"));
                    [f(0), f(1), f(2)]
                })
                .collect();
            lines.push(pts);
        }
        r.finish()?;
        Ok(StreamlineFile { spacing, lines })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(path, &read_bytes(path)?)
    }

    /// One point per line: `streamline point x y z` (mm), with a header row.
    pub fn to_text(&self) -> String {
        let mut s = String::from("streamline point x y z\n");
        for (i, line) in self.lines.iter().enumerate() {
            for (j, p) in line.iter().enumerate() {
                let _ = writeln!(s, "{i} {j} {} {} {}", p[0], p[1], p[2]);
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> StreamlineFile {
        StreamlineFile {
            spacing: [2.0, 2.0, 2.5],
            lines: vec![vec![[0.0, 1.5, -2.25], [1.0, 1.0e-7, 3.0]], vec![], vec![[9.5, 8.0, 7.0]]],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.sdts");
        let f = sample();
        f.write(&p).unwrap();
        let g = StreamlineFile::read(&p).unwrap();
        assert_eq!(g, f);
        assert_eq!(g.to_bytes().unwrap(), std::fs::read(&p).unwrap());
        // Header plus 3 counts plus 3 points.
        assert_eq!(std::fs::read(&p).unwrap().len(), 24 + 12 + 36);
    }

    #[test]
    fn damaged_files_report_offsets() {
        let p = Path::new("t.sdts");
        let bytes = sample().to_bytes().unwrap();
        let e = StreamlineFile::from_bytes(p, &bytes[..bytes.len() - 5]).unwrap_err();
        match e {
            Error::Parse { offset, message, .. } => {
                assert_eq!(offset, 60);
                assert!(message.contains("expected 12 bytes, found 7"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(StreamlineFile::from_bytes(p, &bad).unwrap_err().to_string().contains("bad magic"));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(StreamlineFile::from_bytes(p, &bad).unwrap_err().to_string().contains("version 9"));
    }

    #[test]
    fn text_export_lists_points() {
        let t = sample().to_text();
        assert_eq!(t.lines().count(), 4);
        assert!(t.contains("\n2 0 9.5 8 7\n"));
    }
}
