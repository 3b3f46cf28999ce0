//! FSL-style gradient tables: `bvals` holds one line of b-values, `bvecs`
//! three lines of x, y and z components.

use std::path::Path;

use super::{read_bytes, write_bytes};
use crate::dti::{GradientScheme, Measurement};
use crate::error::{Error, Result};

/// Unit-norm tolerance for directions read from text.
pub const TEXT_NORM_TOL: f64 = 1e-6;

/// Parse whitespace-separated numbers of one line, reporting the byte offset
/// of the first bad token.
fn numbers(path: &Path, text: &str, line_start: usize, line: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let mut rest = line;
    let mut pos = line_start;
    while let Some(start) = rest.find(|c: char| !c.is_whitespace()) {
        let tail = &rest[start..];
        let end = tail.find(char::is_whitespace).unwrap_or(tail.len());
        let tok = &tail[..end];
        let v: f64 = tok
            .parse()
            .map_err(|_| Error::parse(path, (pos + start) as u64, format!("not a number: '{tok}'")))?;
        out.push(v);
        pos += start + end;
        rest = &tail[end..];
    }
    let _ = text;
    Ok(out)
}

fn lines(path: &Path, text: &str) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let vals = numbers(path, text, offset, line)?;
        if !vals.is_empty() {
            out.push(vals);
        }
        offset += line.len();
    }
    Ok(out)
}

fn utf8<'a>(path: &Path, bytes: &'a [u8]) -> Result<&'a str> {
    std::str::from_utf8(bytes).map_err(|e| Error::parse(path, e.valid_up_to() as u64, "file is not UTF-8 text"))
}

/// Read and validate an FSL bvals/bvecs pair.
pub fn read_fsl(bvals: &Path, bvecs: &Path) -> Result<GradientScheme> {
    let bv_bytes = read_bytes(bvals)?;
    let vec_bytes = read_bytes(bvecs)?;
    let bl = lines(bvals, utf8(bvals, &bv_bytes)?)?;
    let vl = lines(bvecs, utf8(bvecs, &vec_bytes)?)?;
    if bl.len() != 1 {
        return Err(Error::parse(bvals, 0, format!("expected 1 line of b-values, found {}", bl.len())));
    }
    if vl.len() != 3 {
        return Err(Error::parse(bvecs, 0, format!("expected 3 lines of components, found {}", vl.len())));
    }
    let n = bl[0].len();
    if vl.iter().any(|l| l.len() != n) {
        return Err(Error::InvalidScheme(format!(
            "count mismatch: {n} b-values but bvecs lines hold {}, {}, {}",
            vl[0].len(),
            vl[1].len(),
            vl[2].len()
        )));
    }
    let entries = (0..n)
        .map(|i| Measurement {
            b: bl[0][i],
            g: [vl[0][i], vl[1][i], vl[2][i]],
        })
        .collect();
    GradientScheme::with_tolerance(entries, TEXT_NORM_TOL)
}

/// Write a scheme as bvals/bvecs using shortest round-trip formatting.
pub fn write_fsl(scheme: &GradientScheme, bvals: &Path, bvecs: &Path) -> Result<()> {
    let join = |f: &dyn Fn(&Measurement) -> f64| -> String {
        scheme.entries().iter().map(|m| format!("{}", f(m))).collect::<Vec<_>>().join(" ")
    };
    write_bytes(bvals, format!("{}\n", join(&|m| m.b)).as_bytes())?;
    let text = format!("{}\n{}\n{}\n", join(&|m| m.g[0]), join(&|m| m.g[1]), join(&|m| m.g[2]));
    write_bytes(bvecs, text.as_bytes())
}
