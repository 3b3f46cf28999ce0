//! Grid geometry and the voxel-wise map containers shared by every module.
//!
//! All volumes are stored flat with x varying fastest, then y, then z. Multi
//! volume stacks (DWIs, channels) append the volume index as the slowest axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.nx;
        let y = (idx / self.nx) % self.ny;
        let z = idx / (self.nx * self.ny);
        (x, y, z)
    }

    pub fn contains(&self, x: isize, y: isize, z: isize) -> bool {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < self.nx
            && (y as usize) < self.ny
            && (z as usize) < self.nz
    }

    pub fn max_dim(&self) -> usize {
        self.nx.max(self.ny).max(self.nz)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }
}

/// Voxel size in millimetres along x, y, z.
pub type Spacing = [f64; 3];

/// Scalar map (FA, MD, error maps) with its foreground mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
}

impl ScalarMap {
    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        ScalarMap {
            dims,
            spacing,
            data: vec![0.0; dims.len()],
            mask: vec![false; dims.len()],
        }
    }

    pub fn from_parts(dims: Dims, spacing: Spacing, data: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if data.len() != dims.len() || mask.len() != dims.len() {
            return Err(Error::Shape(format!(
                "scalar map of {:?} needs {} values, got data {} / mask {}",
                dims,
                dims.len(),
                data.len(),
                mask.len()
            )));
        }
        Ok(ScalarMap {
            dims,
            spacing,
            data,
            mask,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.dims.index(x, y, z)]
    }

    /// Copy of one axial slice (x fastest).
    pub fn slice(&self, z: usize) -> Vec<f64> {
        let n = self.dims.slice_len();
        self.data[z * n..(z + 1) * n].to_vec()
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Direction-encoded colour map: per voxel (|v1.x|, |v1.y|, |v1.z|) scaled by FA.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorMap {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
}

impl ColorMap {
    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        ColorMap {
            dims,
            spacing,
            data: vec![[0.0; 3]; dims.len()],
            mask: vec![false; dims.len()],
        }
    }

    /// One colour channel as a scalar map sharing this map's mask.
    pub fn channel(&self, c: usize) -> ScalarMap {
        ScalarMap {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|v| v[c]).collect(),
            mask: self.mask.clone(),
        }
    }

    pub fn from_channels(channels: [&ScalarMap; 3]) -> Result<Self> {
        let dims = channels[0].dims;
        if channels.iter().any(|c| c.dims != dims) {
            return Err(Error::Shape("colour channels differ in size".into()));
        }
        let data = (0..dims.len())
            .map(|i| [channels[0].data[i], channels[1].data[i], channels[2].data[i]])
            .collect();
        Ok(ColorMap {
            dims,
            spacing: channels[0].spacing,
            data,
            mask: channels[0].mask.clone(),
        })
    }
}

/// Stack of diffusion-weighted volumes; measurement index is the slowest axis.
#[derive(Debug, Clone, PartialEq)]
pub struct DwiVolume {
    pub dims: Dims,
    pub spacing: Spacing,
    pub n_meas: usize,
    pub data: Vec<f64>,
    /// Fingerprint of the gradient scheme the stack was acquired with.
    pub scheme_id: String,
}

impl DwiVolume {
    pub fn zeros(dims: Dims, spacing: Spacing, n_meas: usize, scheme_id: impl Into<String>) -> Self {
        DwiVolume {
            dims,
            spacing,
            n_meas,
            data: vec![0.0; dims.len() * n_meas],
            scheme_id: scheme_id.into(),
        }
    }

    pub fn from_parts(
        dims: Dims,
        spacing: Spacing,
        n_meas: usize,
        data: Vec<f64>,
        scheme_id: impl Into<String>,
    ) -> Result<Self> {
        if data.len() != dims.len() * n_meas {
            return Err(Error::Shape(format!(
                "dwi stack {:?} x {} needs {} values, got {}",
                dims,
                n_meas,
                dims.len() * n_meas,
                data.len()
            )));
        }
        Ok(DwiVolume {
            dims,
            spacing,
            n_meas,
            data,
            scheme_id: scheme_id.into(),
        })
    }

    /// One measurement volume.
    pub fn volume(&self, m: usize) -> &[f64] {
        let n = self.dims.len();
        &self.data[m * n..(m + 1) * n]
    }

    pub fn volume_mut(&mut self, m: usize) -> &mut [f64] {
        let n = self.dims.len();
        &mut self.data[m * n..(m + 1) * n]
    }

    /// Measurement vector of one voxel.
    pub fn voxel(&self, idx: usize) -> Vec<f64> {
        let n = self.dims.len();
        (0..self.n_meas).map(|m| self.data[m * n + idx]).collect()
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }
}

/// Value `q`-quantile (0..=1) of a sample using linear interpolation between
/// order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    v[lo] * (1.0 - frac) + v[hi] * frac
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip() {
        let d = Dims::new(5, 4, 3);
        for i in 0..d.len() {
            let (x, y, z) = d.coords(i);
            assert_eq!(d.index(x, y, z), i);
        }
    }

    #[test]
    fn quantile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 5.0);
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert!((quantile(&v, 0.99) - 4.96).abs() < 1e-12);
    }

    #[test]
    fn scalar_map_rejects_bad_lengths() {
        let d = Dims::new(2, 2, 2);
        assert!(ScalarMap::from_parts(d, [1.0; 3], vec![0.0; 7], vec![true; 8]).is_err());
    }
}
