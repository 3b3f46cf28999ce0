//! Volume files: a JSON sidecar (`<stem>.json`) describing a raw payload
//! (`<stem>.raw`) of little-endian f32 values, x fastest, then y, z, channel.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_bytes, write_bytes};
use crate::dti::{DiffusionTensor, TensorField};
use crate::error::{Error, Result};
use crate::volume::{ColorMap, Dims, DwiVolume, ScalarMap, Spacing};

pub const VOLUME_MAGIC: &str = "SDTI";
pub const VOLUME_VERSION: u32 = 1;

/// What the values mean; decides how readers interpret channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Semantics {
    Dwi,
    Fa,
    Md,
    Colormap,
    Labels,
    Scalar,
    /// Seven channels: Dxx, Dyy, Dzz, Dxy, Dxz, Dyz (mm²/s), then S0.
    Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub magic: String,
    pub version: u32,
    /// [nx, ny, nz].
    pub dims: [usize; 3],
    /// Data channels (excluding the mask channel).
    pub channels: usize,
    /// Voxel size, mm.
    pub spacing: Spacing,
    pub semantics: Semantics,
    /// Divisor applied to the stored values, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divisor: Option<f64>,
    /// When true, one extra trailing channel of 0/1 values holds the
    /// foreground mask.
    #[serde(default)]
    pub has_mask: bool,
    /// Acquisition fingerprint for DWI stacks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme_id: Option<String>,
}

impl VolumeHeader {
    pub fn new(dims: Dims, channels: usize, spacing: Spacing, semantics: Semantics) -> Self {
        VolumeHeader {
            magic: VOLUME_MAGIC.into(),
            version: VOLUME_VERSION,
            dims: dims.as_array(),
            channels,
            spacing,
            semantics,
            divisor: None,
            has_mask: false,
            scheme_id: None,
        }
    }

    pub fn grid(&self) -> Dims {
        Dims::new(self.dims[0], self.dims[1], self.dims[2])
    }

    /// Channels physically present in the raw file.
    pub fn stored_channels(&self) -> usize {
        self.channels + self.has_mask as usize
    }

    pub fn element_count(&self) -> usize {
        self.grid().len() * self.stored_channels()
    }
}

/// Header and raw paths for a stem (any extension on `stem` is replaced).
pub fn volume_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("raw"))
}

/// A volume as stored: header plus f32 values (mask channel included).
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeFile {
    pub header: VolumeHeader,
    pub data: Vec<f32>,
}

impl VolumeFile {
    pub fn write(&self, stem: &Path) -> Result<()> {
        if self.data.len() != self.header.element_count() {
            return Err(Error::Shape(format!(
                "volume has {} values, header implies {}",
                self.data.len(),
                self.header.element_count()
            )));
        }
        let (hp, rp) = volume_paths(stem);
        let json = serde_json::to_vec_pretty(&self.header)?;
        write_bytes(&hp, &json)?;
        let mut raw = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        write_bytes(&rp, &raw)
    }

    pub fn read(stem: &Path) -> Result<Self> {
        let (hp, rp) = volume_paths(stem);
        let text = read_bytes(&hp)?;
        let header: VolumeHeader = serde_json::from_slice(&text).map_err(|e| super::json_error(&hp, &text, &e))?;
        if header.magic != VOLUME_MAGIC {
            return Err(Error::parse(&hp, 0, format!("bad magic '{}', expected '{VOLUME_MAGIC}'", header.magic)));
        }
        if header.version != VOLUME_VERSION {
            return Err(Error::parse(&hp, 0, format!("unsupported version {}", header.version)));
        }
        if header.dims.contains(&0) || header.channels == 0 {
            return Err(Error::parse(&hp, 0, format!("invalid dims {:?} × {} channels", header.dims, header.channels)));
        }
        let raw = read_bytes(&rp)?;
        let want = header.element_count() * 4;
        if raw.len() != want {
            return Err(Error::parse(
                &rp,
                raw.len().min(want) as u64,
                format!("expected {want} bytes, found {}", raw.len()),
            ));
        }
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(VolumeFile { header, data })
    }

    fn channel_f64(&self, c: usize) -> Vec<f64> {
        let n = self.header.grid().len();
        self.data[c * n..(c + 1) * n].iter().map(|&v| v as f64).collect()
    }

    fn mask(&self) -> Option<Vec<bool>> {
        self.header.has_mask.then(|| {
            let n = self.header.grid().len();
            self.data[self.header.channels * n..].iter().map(|&v| v != 0.0).collect()
        })
    }

    fn expect(&self, semantics: &[Semantics], channels: usize) -> Result<()> {
        if !semantics.contains(&self.header.semantics) || self.header.channels != channels {
            return Err(Error::InvalidArgument(format!(
                "volume holds {:?} with {} channels, expected {:?} with {channels}",
                self.header.semantics, self.header.channels, semantics
            )));
        }
        Ok(())
    }

    pub fn from_dwi(dwi: &DwiVolume) -> Self {
        let mut header = VolumeHeader::new(dwi.dims, dwi.n_meas, dwi.spacing, Semantics::Dwi);
        header.scheme_id = Some(dwi.scheme_id.clone());
        VolumeFile {
            header,
            data: dwi.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_dwi(&self) -> Result<DwiVolume> {
        if self.header.semantics != Semantics::Dwi {
            return Err(Error::InvalidArgument(format!("volume holds {:?}, expected dwi", self.header.semantics)));
        }
        let n = self.header.grid().len() * self.header.channels;
        DwiVolume::from_parts(
            self.header.grid(),
            self.header.spacing,
            self.header.channels,
            self.data[..n].iter().map(|&v| v as f64).collect(),
            self.header.scheme_id.clone().unwrap_or_default(),
        )
    }

    pub fn from_scalar(map: &ScalarMap, semantics: Semantics) -> Self {
        let mut header = VolumeHeader::new(map.dims, 1, map.spacing, semantics);
        header.has_mask = true;
        let mut data: Vec<f32> = map.data.iter().map(|&v| v as f32).collect();
        data.extend(map.mask.iter().map(|&m| if m { 1.0f32 } else { 0.0 }));
        VolumeFile { header, data }
    }

    /// Scalar map; without a stored mask every voxel counts as foreground.
    pub fn to_scalar(&self) -> Result<ScalarMap> {
        self.expect(&[Semantics::Fa, Semantics::Md, Semantics::Scalar, Semantics::Labels], 1)?;
        let d = self.header.grid();
        ScalarMap::from_parts(d, self.header.spacing, self.channel_f64(0), self.mask().unwrap_or(vec![true; d.len()]))
    }

    pub fn from_color(map: &ColorMap) -> Self {
        let mut header = VolumeHeader::new(map.dims, 3, map.spacing, Semantics::Colormap);
        header.has_mask = true;
        let mut data: Vec<f32> = (0..3).flat_map(|c| map.data.iter().map(move |v| v[c] as f32)).collect();
        data.extend(map.mask.iter().map(|&m| if m { 1.0f32 } else { 0.0 }));
        VolumeFile { header, data }
    }

    pub fn to_color(&self) -> Result<ColorMap> {
        self.expect(&[Semantics::Colormap], 3)?;
        let d = self.header.grid();
        let ch: Vec<Vec<f64>> = (0..3).map(|c| self.channel_f64(c)).collect();
        let mut m = ColorMap::zeros(d, self.header.spacing);
        for i in 0..d.len() {
            m.data[i] = [ch[0][i], ch[1][i], ch[2][i]];
        }
        m.mask = self.mask().unwrap_or(vec![true; d.len()]);
        Ok(m)
    }

    pub fn from_tensors(field: &TensorField, mask: &[bool]) -> Self {
        let mut header = VolumeHeader::new(field.dims, 7, field.spacing, Semantics::Tensor);
        header.has_mask = true;
        let comps = |t: &DiffusionTensor| [t.dxx, t.dyy, t.dzz, t.dxy, t.dxz, t.dyz, t.s0];
        let mut data: Vec<f32> = (0..7).flat_map(|c| field.tensors.iter().map(move |t| comps(t)[c] as f32)).collect();
        data.extend(mask.iter().map(|&m| if m { 1.0f32 } else { 0.0 }));
        VolumeFile { header, data }
    }

    /// Tensor field and foreground mask.
    pub fn to_tensors(&self) -> Result<(TensorField, Vec<bool>)> {
        self.expect(&[Semantics::Tensor], 7)?;
        let d = self.header.grid();
        let ch: Vec<Vec<f64>> = (0..7).map(|c| self.channel_f64(c)).collect();
        let tensors = (0..d.len())
            .map(|i| DiffusionTensor {
                dxx: ch[0][i],
                dyy: ch[1][i],
                dzz: ch[2][i],
                dxy: ch[3][i],
                dxz: ch[4][i],
                dyz: ch[5][i],
                s0: ch[6][i],
            })
            .collect();
        let field = TensorField {
            dims: d,
            spacing: self.header.spacing,
            tensors,
        };
        Ok((field, self.mask().unwrap_or(vec![true; d.len()])))
    }

    pub fn from_labels(dims: Dims, spacing: Spacing, labels: &[u32]) -> Self {
        VolumeFile {
            header: VolumeHeader::new(dims, 1, spacing, Semantics::Labels),
            data: labels.iter().map(|&l| l as f32).collect(),
        }
    }

    pub fn to_labels(&self) -> Result<Vec<u32>> {
        self.expect(&[Semantics::Labels], 1)?;
        Ok(self.data[..self.header.grid().len()].iter().map(|&v| v as u32).collect())
    }
}
