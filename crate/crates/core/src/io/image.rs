//! 8-bit PNG panels of single axial slices. Row 0 is y = 0, column 0 is
//! x = 0; background (outside the mask) is black.

use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{ColorMap, ScalarMap};

/// Linear display window; values map to [0, 255] and clip outside it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

impl Window {
    pub const FA: Window = Window { lo: 0.0, hi: 1.0 };

    /// [0, foreground max] of a map (unit window if the map is empty or zero).
    pub fn auto(map: &ScalarMap) -> Window {
        let hi = map
            .data
            .iter()
            .zip(&map.mask)
            .filter(|(v, &m)| m && v.is_finite())
            .map(|(v, _)| *v)
            .fold(0.0, f64::max);
        Window {
            lo: 0.0,
            hi: if hi > 0.0 { hi } else { 1.0 },
        }
    }

    fn level(&self, v: f64) -> u8 {
        if !v.is_finite() || self.hi <= self.lo {
            return 0;
        }
        ((v - self.lo) / (self.hi - self.lo) * 255.0).round().clamp(0.0, 255.0) as u8
    }
}

/// Fraction of the reference window that renders white in error maps: an
/// absolute error of 0.2 FA units saturates.
pub const ERROR_WINDOW_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    pub pixels: Vec<u8>,
}

fn check_slice(nz: usize, z: usize) -> Result<()> {
    if z >= nz {
        return Err(Error::InvalidArgument(format!("slice {z} outside 0..{nz}")));
    }
    Ok(())
}

pub fn render_scalar_slice(map: &ScalarMap, z: usize, window: Window) -> Result<Image> {
    check_slice(map.dims.nz, z)?;
    let n = map.dims.slice_len();
    let base = z * n;
    let pixels = (base..base + n)
        .map(|i| if map.mask[i] { window.level(map.data[i]) } else { 0 })
        .collect();
    Ok(Image {
        width: map.dims.nx,
        height: map.dims.ny,
        channels: 1,
        pixels,
    })
}

/// RGB with each channel windowed on [0, 1].
pub fn render_color_slice(map: &ColorMap, z: usize) -> Result<Image> {
    check_slice(map.dims.nz, z)?;
    let n = map.dims.slice_len();
    let base = z * n;
    let mut pixels = Vec::with_capacity(3 * n);
    for i in base..base + n {
        for c in 0..3 {
            pixels.push(if map.mask[i] { Window::FA.level(map.data[i][c]) } else { 0 });
        }
    }
    Ok(Image {
        width: map.dims.nx,
        height: map.dims.ny,
        channels: 3,
        pixels,
    })
}

/// |map − reference| on [0, ERROR_WINDOW_FRACTION · reference window width].
pub fn render_error_slice(map: &ScalarMap, reference: &ScalarMap, z: usize, window: Window) -> Result<Image> {
    if map.dims != reference.dims {
        return Err(Error::Shape(format!("error map {:?} vs reference {:?}", map.dims, reference.dims)));
    }
    let mut err = reference.clone();
    for (e, (a, b)) in err.data.iter_mut().zip(map.data.iter().zip(&reference.data)) {
        *e = (a - b).abs();
    }
    let ew = Window {
        lo: 0.0,
        hi: ERROR_WINDOW_FRACTION * (window.hi - window.lo),
    };
    render_scalar_slice(&err, z, ew)
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), img.width as u32, img.height as u32);
        enc.set_color(if img.channels == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header()?;
        w.write_image_data(&img.pixels)?;
        w.finish()?;
    }
    Ok(out)
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    super::write_bytes(path, &encode_png(img)?)
}
