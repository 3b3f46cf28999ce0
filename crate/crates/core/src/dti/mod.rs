//! Diffusion tensor model: forward signal prediction, log-linear least-squares
//! fitting, eigen-decomposition and the derived scalar/colour maps.

mod eigen;
mod scheme;

pub use eigen::{eig3_sym, eig3_sym_matrix, EigenSystem};
pub(crate) use eigen::{dot, norm};
pub use scheme::{
    build_design_matrix, condition_number, scheme_condition_number, GradientScheme, Measurement,
    UNIT_NORM_TOL,
};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{quantile, ColorMap, Dims, DwiVolume, ScalarMap, Spacing};

/// Signals are floored at this fraction of the b=0 estimate before the log.
pub const SIGNAL_FLOOR: f64 = 1e-6;

/// Foreground threshold as a fraction of the 99th percentile mean-b0 intensity.
pub const MASK_FRACTION: f64 = 0.1;

/// Symmetric diffusion tensor (mm²/s) and unweighted signal scale.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DiffusionTensor {
    pub dxx: f64,
    pub dyy: f64,
    pub dzz: f64,
    pub dxy: f64,
    pub dxz: f64,
    pub dyz: f64,
    pub s0: f64,
}

impl DiffusionTensor {
    pub fn isotropic(d: f64, s0: f64) -> Self {
        DiffusionTensor {
            dxx: d,
            dyy: d,
            dzz: d,
            s0,
            ..Default::default()
        }
    }

    /// Tensor with eigenvalues `lambda` along the orthonormal `axes`.
    pub fn from_eigen(lambda: [f64; 3], axes: [[f64; 3]; 3], s0: f64) -> Self {
        let mut m = [[0.0; 3]; 3];
        for k in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += lambda[k] * axes[k][i] * axes[k][j];
                }
            }
        }
        Self::from_matrix(m, s0)
    }

    pub fn from_matrix(m: [[f64; 3]; 3], s0: f64) -> Self {
        DiffusionTensor {
            dxx: m[0][0],
            dyy: m[1][1],
            dzz: m[2][2],
            dxy: m[0][1],
            dxz: m[0][2],
            dyz: m[1][2],
            s0,
        }
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [
            [self.dxx, self.dxy, self.dxz],
            [self.dxy, self.dyy, self.dyz],
            [self.dxz, self.dyz, self.dzz],
        ]
    }

    pub fn components(&self) -> [f64; 6] {
        [self.dxx, self.dyy, self.dzz, self.dxy, self.dxz, self.dyz]
    }

    /// gᵀ D g
    pub fn quadratic_form(&self, g: [f64; 3]) -> f64 {
        let [x, y, z] = g;
        self.dxx * x * x
            + self.dyy * y * y
            + self.dzz * z * z
            + 2.0 * (self.dxy * x * y + self.dxz * x * z + self.dyz * y * z)
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|v| v.is_finite()) && self.s0.is_finite()
    }
}

/// S_i = S0 · exp(−b_i gᵢᵀ D gᵢ)
pub fn predict_signal(tensor: &DiffusionTensor, scheme: &GradientScheme) -> Vec<f64> {
    scheme
        .entries()
        .iter()
        .map(|m| tensor.s0 * (-m.b * tensor.quadratic_form(m.g)).exp())
        .collect()
}

/// Precomputed unweighted log-linear least-squares solver for one scheme.
#[derive(Debug, Clone)]
pub struct TensorFitter {
    /// 7 x n pseudo-inverse of the design matrix.
    pinv: DMatrix<f64>,
    b0_rows: Vec<usize>,
}

impl TensorFitter {
    pub fn new(scheme: &GradientScheme) -> Result<Self> {
        let a = build_design_matrix(scheme)?;
        // Column scaling keeps the b≈1000 columns commensurate with the intercept.
        let (scaled, scales) = scheme::column_scaled(&a);
        let mut pinv = scaled
            .svd(true, true)
            .pseudo_inverse(1e-14)
            .map_err(|e| Error::DegenerateScheme(e.to_string()))?;
        for (j, s) in scales.iter().enumerate() {
            pinv.row_mut(j).scale_mut(1.0 / s);
        }
        Ok(TensorFitter {
            pinv,
            b0_rows: scheme.b0_indices(),
        })
    }

    pub fn n_meas(&self) -> usize {
        self.pinv.ncols()
    }

    pub fn fit(&self, signals: &[f64]) -> Result<DiffusionTensor> {
        if signals.len() != self.n_meas() {
            return Err(Error::Shape(format!(
                "{} signals for a {}-measurement scheme",
                signals.len(),
                self.n_meas()
            )));
        }
        if signals.iter().any(|s| !s.is_finite()) {
            return Err(Error::VoxelSkipped("non-finite signal".into()));
        }
        let s0_est = self.b0_rows.iter().map(|&i| signals[i]).sum::<f64>() / self.b0_rows.len() as f64;
        if !(s0_est > 0.0) {
            return Err(Error::VoxelSkipped("no b=0 signal".into()));
        }
        let floor = SIGNAL_FLOOR * s0_est;
        let y = DVector::from_iterator(signals.len(), signals.iter().map(|&s| s.max(floor).ln()));
        let x = &self.pinv * y;
        Ok(DiffusionTensor {
            s0: x[0].exp(),
            dxx: x[1],
            dyy: x[2],
            dzz: x[3],
            dxy: x[4],
            dxz: x[5],
            dyz: x[6],
        })
    }
}

/// One-shot fit of a single voxel.
pub fn fit_tensor_lls(signals: &[f64], scheme: &GradientScheme) -> Result<DiffusionTensor> {
    TensorFitter::new(scheme)?.fit(signals)
}

/// FA from eigenvalues (negatives clamped to zero), in [0, 1].
pub fn fa(eigs: &EigenSystem) -> f64 {
    fa_from_values(eigs.clamped_values())
}

pub fn fa_from_values(l: [f64; 3]) -> f64 {
    let norm2 = l[0] * l[0] + l[1] * l[1] + l[2] * l[2];
    if norm2 == 0.0 {
        return 0.0;
    }
    let mean = (l[0] + l[1] + l[2]) / 3.0;
    let dev2 = (l[0] - mean).powi(2) + (l[1] - mean).powi(2) + (l[2] - mean).powi(2);
    (1.5 * dev2 / norm2).sqrt().clamp(0.0, 1.0)
}

/// Mean diffusivity (negatives clamped to zero).
pub fn md(eigs: &EigenSystem) -> f64 {
    let l = eigs.clamped_values();
    (l[0] + l[1] + l[2]) / 3.0
}

/// (|v1.x|, |v1.y|, |v1.z|) · FA
pub fn colormap_voxel(eigs: &EigenSystem, fa_value: f64) -> [f64; 3] {
    eigs.vectors[0].map(|c| c.abs() * fa_value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub dims: Dims,
    pub spacing: Spacing,
    pub tensors: Vec<DiffusionTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenField {
    pub dims: Dims,
    pub spacing: Spacing,
    pub eigs: Vec<EigenSystem>,
    pub mask: Vec<bool>,
}

impl EigenField {
    pub fn principal(&self, idx: usize) -> [f64; 3] {
        self.eigs[idx].vectors[0]
    }
}

/// Output of [`compute_maps`].
#[derive(Debug, Clone)]
pub struct DtiMaps {
    pub fa: ScalarMap,
    pub md: ScalarMap,
    pub color: ColorMap,
    pub eigen: EigenField,
    pub tensors: TensorField,
}

/// Mean b=0 intensity per voxel.
pub fn mean_b0(dwi: &DwiVolume, scheme: &GradientScheme) -> Vec<f64> {
    let b0 = scheme.b0_indices();
    let mut out = vec![0.0; dwi.dims.len()];
    for &m in &b0 {
        for (o, v) in out.iter_mut().zip(dwi.volume(m)) {
            *o += v;
        }
    }
    let n = b0.len().max(1) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Voxels whose mean b=0 signal exceeds 10% of the 99th percentile.
pub fn foreground_mask(dwi: &DwiVolume, scheme: &GradientScheme) -> Vec<bool> {
    let b0 = mean_b0(dwi, scheme);
    let thresh = MASK_FRACTION * quantile(&b0, 0.99);
    b0.iter().map(|&v| v > thresh).collect()
}

/// Voxel-wise fit → eigen → FA/MD/colour over the foreground; background is zero.
pub fn compute_maps(dwi: &DwiVolume, scheme: &GradientScheme) -> Result<DtiMaps> {
    if dwi.n_meas != scheme.len() {
        return Err(Error::Shape(format!(
            "dwi has {} volumes, scheme has {} entries",
            dwi.n_meas,
            scheme.len()
        )));
    }
    let fitter = TensorFitter::new(scheme)?;
    let mask = foreground_mask(dwi, scheme);
    let dims = dwi.dims;

    let per_voxel: Vec<Option<(DiffusionTensor, EigenSystem)>> = (0..dims.len())
        .into_par_iter()
        .map(|i| {
            if !mask[i] {
                return None;
            }
            let t = fitter.fit(&dwi.voxel(i)).ok()?;
            Some((t, eig3_sym(&t)))
        })
        .collect();

    let mut fa_map = ScalarMap::zeros(dims, dwi.spacing);
    let mut md_map = ScalarMap::zeros(dims, dwi.spacing);
    let mut color = ColorMap::zeros(dims, dwi.spacing);
    let mut eigs = vec![EigenSystem::zero(); dims.len()];
    let mut tensors = vec![DiffusionTensor::default(); dims.len()];
    let mut fg = vec![false; dims.len()];
    for (i, r) in per_voxel.into_iter().enumerate() {
        if let Some((t, e)) = r {
            let f = fa(&e);
            fa_map.data[i] = f;
            md_map.data[i] = md(&e);
            color.data[i] = colormap_voxel(&e, f);
            eigs[i] = e;
            tensors[i] = t;
            fg[i] = true;
        }
    }
    fa_map.mask = fg.clone();
    md_map.mask = fg.clone();
    color.mask = fg.clone();
    Ok(DtiMaps {
        fa: fa_map,
        md: md_map,
        color,
        eigen: EigenField {
            dims,
            spacing: dwi.spacing,
            eigs,
            mask: fg,
        },
        tensors: TensorField {
            dims,
            spacing: dwi.spacing,
            tensors,
        },
    })
}

/// Eigen/FA/MD/colour maps straight from a tensor field; `mask` selects voxels.
pub fn maps_from_tensors(field: &TensorField, mask: &[bool]) -> DtiMaps {
    let dims = field.dims;
    let mut fa_map = ScalarMap::zeros(dims, field.spacing);
    let mut md_map = ScalarMap::zeros(dims, field.spacing);
    let mut color = ColorMap::zeros(dims, field.spacing);
    let mut eigs = vec![EigenSystem::zero(); dims.len()];
    for i in 0..dims.len() {
        if !mask[i] {
            continue;
        }
        let e = eig3_sym(&field.tensors[i]);
        let f = fa(&e);
        fa_map.data[i] = f;
        md_map.data[i] = md(&e);
        color.data[i] = colormap_voxel(&e, f);
        eigs[i] = e;
    }
    fa_map.mask = mask.to_vec();
    md_map.mask = mask.to_vec();
    color.mask = mask.to_vec();
    DtiMaps {
        fa: fa_map,
        md: md_map,
        color,
        eigen: EigenField {
            dims,
            spacing: field.spacing,
            eigs,
            mask: mask.to_vec(),
        },
        tensors: field.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scheme_axes_plus_diagonals() -> GradientScheme {
        let s = 1.0 / 2f64.sqrt();
        let dirs = [
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [s, s, 0.0],
            [s, 0.0, s],
            [0.0, s, s],
            [s, -s, 0.0],
            [0.0, s, -s],
        ];
        let mut e = vec![Measurement { b: 0.0, g: [0.0; 3] }];
        e.extend(dirs.iter().map(|&g| Measurement { b: 1000.0, g }));
        GradientScheme::new(e).unwrap()
    }

    fn rel_err(a: &DiffusionTensor, b: &DiffusionTensor) -> f64 {
        let d: f64 = a
            .components()
            .iter()
            .zip(b.components())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let n: f64 = b.components().iter().map(|v| v * v).sum::<f64>().sqrt();
        d / n
    }

    fn rotation(ax: f64, ay: f64, az: f64) -> [[f64; 3]; 3] {
        let (sx, cx) = ax.sin_cos();
        let (sy, cy) = ay.sin_cos();
        let (sz, cz) = az.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        mul(&mul(&rz, &ry), &rx)
    }

    fn mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    m[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        m
    }

    #[test]
    fn predict_b0_is_s0() {
        let t = DiffusionTensor::isotropic(0.7e-3, 123.0);
        let s = predict_signal(&t, &scheme_axes_plus_diagonals());
        assert_eq!(s[0], 123.0);
    }

    #[test]
    fn predict_isotropic_is_direction_independent() {
        let t = DiffusionTensor::isotropic(0.8e-3, 2.0);
        let s = predict_signal(&t, &scheme_axes_plus_diagonals());
        for v in &s[1..] {
            assert!((v - 2.0 * (-0.8f64).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn predict_axial_tensor() {
        let t = DiffusionTensor {
            dxx: 1.7e-3,
            dyy: 0.3e-3,
            dzz: 0.3e-3,
            s0: 1.0,
            ..Default::default()
        };
        let s = predict_signal(&t, &scheme_axes_plus_diagonals());
        // e^-1.7 = 0.18268352405273465 (extended precision)
        assert!((s[1] - 0.182_683_524_052_734_65).abs() < 1e-15);
    }

    #[test]
    fn fit_constant_signal_is_zero_tensor() {
        let t = fit_tensor_lls(&[5.0; 9], &scheme_axes_plus_diagonals()).unwrap();
        for c in t.components() {
            assert!(c.abs() < 1e-15);
        }
        assert!((t.s0 - 5.0).abs() < 1e-12);
    }

    #[test]
    fn fit_isotropic_decay() {
        let d = 0.9e-3;
        let scheme = scheme_axes_plus_diagonals();
        let s: Vec<f64> = scheme.entries().iter().map(|m| 3.0 * (-m.b * d).exp()).collect();
        let t = fit_tensor_lls(&s, &scheme).unwrap();
        assert!(rel_err(&t, &DiffusionTensor::isotropic(d, 3.0)) < 1e-12);
    }

    #[test]
    fn fit_rejects_non_finite_and_empty_b0() {
        let scheme = scheme_axes_plus_diagonals();
        let mut s = vec![1.0; 9];
        s[3] = f64::NAN;
        assert!(matches!(fit_tensor_lls(&s, &scheme), Err(Error::VoxelSkipped(_))));
        assert!(matches!(fit_tensor_lls(&[0.0; 9], &scheme), Err(Error::VoxelSkipped(_))));
    }

    #[test]
    fn fit_clamps_zero_signals() {
        let scheme = scheme_axes_plus_diagonals();
        let mut s = vec![1.0; 9];
        s[2] = 0.0;
        let t = fit_tensor_lls(&s, &scheme).unwrap();
        assert!(t.is_finite());
    }

    #[test]
    fn fa_examples() {
        let iso = EigenSystem { values: [0.5e-3; 3], ..EigenSystem::zero() };
        assert_eq!(fa(&iso), 0.0);
        let line = EigenSystem { values: [1.0, 0.0, 0.0], ..EigenSystem::zero() };
        assert!((fa(&line) - 1.0).abs() < 1e-15);
        let wm = EigenSystem { values: [1.7e-3, 0.3e-3, 0.3e-3], ..EigenSystem::zero() };
        // sqrt(1.5 * 1.306667e-6 / 3.07e-6) = 0.79900...
        assert!((fa(&wm) - 0.799).abs() < 5e-4);
        assert_eq!(fa(&EigenSystem::zero()), 0.0);
    }

    #[test]
    fn md_examples() {
        let wm = EigenSystem { values: [1.7e-3, 0.3e-3, 0.3e-3], ..EigenSystem::zero() };
        assert!((md(&wm) - 0.766_666_666_666_666_7e-3).abs() < 1e-18);
        let iso = EigenSystem { values: [0.4e-3; 3], ..EigenSystem::zero() };
        assert!((md(&iso) - 0.4e-3).abs() < 1e-18);
        assert_eq!(md(&EigenSystem::zero()), 0.0);
    }

    #[test]
    fn negative_eigenvalues_are_clamped_for_scalars() {
        let e = EigenSystem { values: [1e-3, 0.5e-3, -0.2e-3], ..EigenSystem::zero() };
        assert!(e.has_negative());
        assert_eq!(e.values[2], -0.2e-3);
        assert!((md(&e) - 0.5e-3).abs() < 1e-18);
        assert!(fa(&e) <= 1.0);
    }

    #[test]
    fn colormap_examples() {
        let e = EigenSystem::zero();
        assert_eq!(colormap_voxel(&e, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(colormap_voxel(&e, 0.0), [0.0, 0.0, 0.0]);
        let r = 1.0 / 3f64.sqrt();
        let e = EigenSystem { vectors: [[r, r, r], [0.0; 3], [0.0; 3]], ..EigenSystem::zero() };
        for c in colormap_voxel(&e, 0.6) {
            assert!((c - 0.346_410_161_513_775_4).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_signals_scales_s0_only() {
        let scheme = scheme_axes_plus_diagonals();
        let t = DiffusionTensor::from_eigen(
            [1.5e-3, 0.5e-3, 0.2e-3],
            rotation(0.3, 0.7, 1.1),
            100.0,
        );
        let s = predict_signal(&t, &scheme);
        let a = fit_tensor_lls(&s, &scheme).unwrap();
        let b = fit_tensor_lls(&s.iter().map(|v| v * 7.5).collect::<Vec<_>>(), &scheme).unwrap();
        assert!(rel_err(&a, &b) < 1e-10);
        assert!((b.s0 / a.s0 - 7.5).abs() < 1e-10);
    }

    #[test]
    fn all_zero_volume_is_background() {
        let scheme = scheme_axes_plus_diagonals();
        let dwi = DwiVolume::zeros(Dims::new(4, 4, 2), [1.0; 3], scheme.len(), "");
        let maps = compute_maps(&dwi, &scheme).unwrap();
        assert_eq!(maps.fa.foreground_count(), 0);
        assert!(maps.fa.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compute_maps_rejects_count_mismatch() {
        let scheme = scheme_axes_plus_diagonals();
        let dwi = DwiVolume::zeros(Dims::new(4, 4, 2), [1.0; 3], 5, "");
        assert!(matches!(compute_maps(&dwi, &scheme), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn round_trip_recovers_tensor(
            l1 in 0.5e-3..2.5e-3f64, r2 in 0.1..1.0f64, r3 in 0.1..1.0f64,
            a in prop::array::uniform3(0.0..6.3f64), s0 in 1.0..5000.0f64,
        ) {
            let scheme = scheme_axes_plus_diagonals();
            let l2 = l1 * r2;
            let l3 = l2 * r3;
            let t = DiffusionTensor::from_eigen([l1, l2, l3], rotation(a[0], a[1], a[2]), s0);
            let fit = fit_tensor_lls(&predict_signal(&t, &scheme), &scheme).unwrap();
            prop_assert!(rel_err(&fit, &t) < 1e-10);
            prop_assert!((fit.s0 - s0).abs() / s0 < 1e-10);
        }

        #[test]
        fn fa_md_rotation_invariant(
            l in prop::array::uniform3(0.0..3e-3f64),
            a in prop::array::uniform3(0.0..6.3f64),
        ) {
            let d = DiffusionTensor::from_eigen(l, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 1.0);
            let r = rotation(a[0], a[1], a[2]);
            let rd = DiffusionTensor::from_eigen(l, r, 1.0);
            let (e0, e1) = (eig3_sym(&d), eig3_sym(&rd));
            prop_assert!((fa(&e0) - fa(&e1)).abs() < 1e-10);
            prop_assert!((md(&e0) - md(&e1)).abs() < 1e-10 * 3e-3);
            prop_assert!((0.0..=1.0).contains(&fa(&e1)));
        }

        #[test]
        fn fa_always_in_unit_interval(l in prop::array::uniform3(-3e-3..3e-3f64)) {
            let e = EigenSystem { values: l, ..EigenSystem::zero() };
            let f = fa(&e);
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }
}
