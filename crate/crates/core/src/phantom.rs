//! Synthetic subjects: gradient schemes, tensor phantoms, DWI synthesis and
//! the corruptions used by the robustness experiments (Rician noise, in-plane
//! motion, FA-reducing lesions).
//!
//! Geometry is expressed in voxel-index coordinates: voxel `(i, j, k)` has its
//! centre at `(i, j, k)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dti::{
    self, colormap_voxel, eig3_sym, fa_from_values, DiffusionTensor, EigenField, EigenSystem,
    GradientScheme, Measurement, TensorField,
};
use crate::error::{Error, Result};
use crate::volume::{ColorMap, Dims, DwiVolume, ScalarMap};

/// Iterations of the electrostatic direction optimizer.
pub const SCHEME_ITERATIONS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    /// Axis-aligned box, bounds inclusive.
    Box { min: [f64; 3], max: [f64; 3] },
    Cylinder {
        center: [f64; 3],
        axis: [f64; 3],
        radius: f64,
        half_length: f64,
    },
    /// Circular arc in the axial (x-y) plane with a rectangular cross-section;
    /// angles in radians measured from +x towards +y.
    Arc {
        center: [f64; 3],
        radius: f64,
        half_width: f64,
        half_height: f64,
        angle_start: f64,
        angle_end: f64,
    },
    Sphere { center: [f64; 3], radius: f64 },
}

impl Shape {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            Shape::Box { min, max } => (0..3).all(|k| p[k] >= min[k] && p[k] <= max[k]),
            Shape::Cylinder {
                center,
                axis,
                radius,
                half_length,
            } => {
                let a = unit(axis);
                let d = sub(p, center);
                let along = dot(d, a);
                let radial2 = dot(d, d) - along * along;
                along.abs() <= half_length && radial2 <= radius * radius
            }
            Shape::Arc {
                center,
                radius,
                half_width,
                half_height,
                angle_start,
                angle_end,
            } => {
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                let rho = (dx * dx + dy * dy).sqrt();
                if (rho - radius).abs() > half_width || (p[2] - center[2]).abs() > half_height {
                    return false;
                }
                let mut theta = dy.atan2(dx);
                if theta < angle_start {
                    theta += std::f64::consts::TAU;
                }
                theta >= angle_start && theta <= angle_end
            }
            Shape::Sphere { center, radius } => {
                let d = sub(p, center);
                dot(d, d) <= radius * radius
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Orientation {
    /// Principal direction along the cylinder axis.
    Axis,
    /// Principal direction along the local arc tangent.
    Tangent,
    Fixed { dir: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecipe {
    /// λ1 ≥ λ2 ≥ λ3 ≥ 0 in mm²/s.
    pub lambda: [f64; 3],
    pub orientation: Orientation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub label: u32,
    #[serde(default)]
    pub name: String,
    pub shape: Shape,
    pub tensor: TensorRecipe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    /// Label of the host region; only its voxels inside `shape` are affected.
    pub region: u32,
    pub shape: Shape,
    /// Target FA as a fraction of the original (1 = unchanged, 0 = isotropic).
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Unweighted signal inside tissue.
    pub s0: f64,
    /// Later regions overwrite earlier ones where they overlap.
    pub regions: Vec<Region>,
    #[serde(default)]
    pub lesions: Vec<LesionSpec>,
    #[serde(default)]
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::InvalidArgument(format!(
                "phantom dims {:?}: every axis needs at least 16 voxels",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) || !(self.s0 > 0.0) {
            return Err(Error::InvalidArgument("spacing and s0 must be positive".into()));
        }
        let mut labels = Vec::new();
        for r in &self.regions {
            if r.label == 0 {
                return Err(Error::InvalidArgument("label 0 is reserved for background".into()));
            }
            if labels.contains(&r.label) {
                return Err(Error::InvalidArgument(format!("duplicate region label {}", r.label)));
            }
            labels.push(r.label);
            let l = r.tensor.lambda;
            if !(l[0] >= l[1] && l[1] >= l[2] && l[2] >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "region {}: eigenvalues {:?} must satisfy λ1 ≥ λ2 ≥ λ3 ≥ 0",
                    r.label, l
                )));
            }
            match (&r.tensor.orientation, &r.shape) {
                (Orientation::Axis, Shape::Cylinder { .. }) | (Orientation::Tangent, Shape::Arc { .. }) => {}
                (Orientation::Fixed { dir }, _) if dot(*dir, *dir) > 0.0 => {}
                (o, _) => {
                    return Err(Error::InvalidArgument(format!(
                        "region {}: orientation {:?} does not fit its shape",
                        r.label, o
                    )))
                }
            }
        }
        for l in &self.lesions {
            if !labels.contains(&l.region) {
                return Err(Error::InvalidArgument(format!(
                    "lesion references unknown region {}",
                    l.region
                )));
            }
            if !(0.0..=1.0).contains(&l.factor) {
                return Err(Error::InvalidArgument(format!("lesion factor {} outside [0, 1]", l.factor)));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Dims {
        Dims::new(self.dims[0], self.dims[1], self.dims[2])
    }

    pub fn region(&self, label: u32) -> Option<&Region> {
        self.regions.iter().find(|r| r.label == label)
    }

    /// Desk-scale brain: isotropic tissue, an arc bundle (callosal), a vertical
    /// bundle (corticospinal) and an anterior-posterior bundle (longitudinal).
    /// Geometry scales with `dims` from a 64×64×16 template.
    pub fn default_brain(dims: [usize; 3]) -> PhantomSpec {
        BrainLayout::template().build(dims, 0)
    }

    /// Seeded variation of [`PhantomSpec::default_brain`]: positions, sizes and
    /// eigenvalues are jittered so each seed is a distinct "subject".
    pub fn subject(dims: [usize; 3], seed: u64) -> PhantomSpec {
        BrainLayout::jittered(seed).build(dims, seed)
    }

    /// Isotropic tissue filling the grid crossed by one straight bundle along
    /// x through the centre, radius an eighth of the in-plane size.
    pub fn straight_bundle(dims: [usize; 3]) -> PhantomSpec {
        let max = dims.map(|d| d as f64 - 1.0);
        let c = max.map(|m| m / 2.0);
        PhantomSpec {
            dims,
            spacing: [2.0; 3],
            s0: 100.0,
            regions: vec![
                Region {
                    label: LABEL_TISSUE,
                    name: "tissue".into(),
                    shape: Shape::Box { min: [0.0; 3], max },
                    tensor: TensorRecipe {
                        lambda: [0.7e-3; 3],
                        orientation: Orientation::Fixed { dir: [1.0, 0.0, 0.0] },
                    },
                },
                Region {
                    label: LABEL_HORIZONTAL,
                    name: "bundle".into(),
                    shape: Shape::Cylinder {
                        center: c,
                        axis: [1.0, 0.0, 0.0],
                        radius: dims[0].min(dims[1]) as f64 / 8.0,
                        half_length: max[0],
                    },
                    tensor: TensorRecipe {
                        lambda: [1.7e-3, 0.3e-3, 0.3e-3],
                        orientation: Orientation::Axis,
                    },
                },
            ],
            lesions: Vec::new(),
            seed: 0,
        }
    }
}

pub const LABEL_TISSUE: u32 = 1;
pub const LABEL_ARC: u32 = 2;
pub const LABEL_VERTICAL: u32 = 3;
pub const LABEL_HORIZONTAL: u32 = 4;

/// Parameters of the brain-like layout on the 64×64×16 template grid.
#[derive(Debug, Clone)]
struct BrainLayout {
    s0: f64,
    tissue_d: f64,
    tissue_radius: f64,
    arc_center: [f64; 2],
    arc_radius: f64,
    arc_half_width: f64,
    arc_angles: [f64; 2],
    arc_lambda: [f64; 3],
    vert_center: [f64; 2],
    vert_radius: f64,
    vert_lambda: [f64; 3],
    horiz_center: [f64; 2],
    horiz_radius: f64,
    horiz_half_length: f64,
    horiz_tilt: f64,
    horiz_lambda: [f64; 3],
}

impl BrainLayout {
    fn template() -> Self {
        use std::f64::consts::PI;
        BrainLayout {
            s0: 1000.0,
            tissue_d: 0.8e-3,
            tissue_radius: 29.0,
            arc_center: [31.5, 36.0],
            arc_radius: 15.0,
            arc_half_width: 2.6,
            arc_angles: [0.12 * PI, 0.88 * PI],
            arc_lambda: [1.7e-3, 0.3e-3, 0.3e-3],
            vert_center: [18.0, 22.0],
            vert_radius: 2.8,
            vert_lambda: [1.5e-3, 0.35e-3, 0.3e-3],
            horiz_center: [46.0, 20.0],
            horiz_radius: 2.8,
            horiz_half_length: 10.0,
            horiz_tilt: 0.0,
            horiz_lambda: [1.6e-3, 0.4e-3, 0.3e-3],
        }
    }

    fn jittered(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f5a_b1ec7);
        let mut t = Self::template();
        let jitter2 = |c: [f64; 2], rng: &mut ChaCha8Rng| {
            [c[0] + rng.random_range(-2.0..2.0), c[1] + rng.random_range(-2.0..2.0)]
        };
        let lambda = |rng: &mut ChaCha8Rng| {
            let l1: f64 = rng.random_range(1.3e-3..1.9e-3);
            let l2: f64 = rng.random_range(0.25e-3..0.65e-3);
            let l3: f64 = rng.random_range(0.2e-3..l2.max(0.2e-3 + 1e-9));
            [l1, l2, l3]
        };
        t.s0 = rng.random_range(800.0..1200.0);
        t.tissue_d = rng.random_range(0.7e-3..0.9e-3);
        t.arc_center = jitter2(t.arc_center, &mut rng);
        t.arc_radius *= rng.random_range(0.9..1.1);
        t.arc_half_width *= rng.random_range(0.85..1.2);
        t.arc_angles[0] += rng.random_range(-0.25..0.25);
        t.arc_angles[1] += rng.random_range(-0.25..0.25);
        t.arc_lambda = lambda(&mut rng);
        t.vert_center = jitter2(t.vert_center, &mut rng);
        t.vert_radius *= rng.random_range(0.85..1.2);
        t.vert_lambda = lambda(&mut rng);
        t.horiz_center = jitter2(t.horiz_center, &mut rng);
        t.horiz_radius *= rng.random_range(0.85..1.2);
        t.horiz_half_length *= rng.random_range(0.8..1.1);
        t.horiz_tilt = rng.random_range(-0.3..0.3);
        t.horiz_lambda = lambda(&mut rng);
        t
    }

    fn build(&self, dims: [usize; 3], seed: u64) -> PhantomSpec {
        let sx = dims[0] as f64 / 64.0;
        let sy = dims[1] as f64 / 64.0;
        let sz = dims[2] as f64 / 16.0;
        let s_in = sx.min(sy);
        let zc = (dims[2] as f64 - 1.0) / 2.0;
        let xy = |c: [f64; 2], z: f64| [c[0] * sx, c[1] * sy, z];
        let tilt = self.horiz_tilt;
        let regions = vec![
            Region {
                label: LABEL_TISSUE,
                name: "tissue".into(),
                shape: Shape::Cylinder {
                    center: xy([31.5, 31.5], zc),
                    axis: [0.0, 0.0, 1.0],
                    radius: self.tissue_radius * s_in,
                    half_length: dims[2] as f64,
                },
                tensor: TensorRecipe {
                    lambda: [self.tissue_d; 3],
                    orientation: Orientation::Fixed { dir: [1.0, 0.0, 0.0] },
                },
            },
            Region {
                label: LABEL_ARC,
                name: "arc".into(),
                shape: Shape::Arc {
                    center: xy(self.arc_center, zc),
                    radius: self.arc_radius * s_in,
                    half_width: self.arc_half_width * s_in,
                    half_height: 3.6 * sz,
                    angle_start: self.arc_angles[0],
                    angle_end: self.arc_angles[1],
                },
                tensor: TensorRecipe {
                    lambda: self.arc_lambda,
                    orientation: Orientation::Tangent,
                },
            },
            Region {
                label: LABEL_VERTICAL,
                name: "vertical".into(),
                shape: Shape::Cylinder {
                    center: xy(self.vert_center, zc),
                    axis: [0.0, 0.0, 1.0],
                    radius: self.vert_radius * s_in,
                    half_length: dims[2] as f64,
                },
                tensor: TensorRecipe {
                    lambda: self.vert_lambda,
                    orientation: Orientation::Axis,
                },
            },
            Region {
                label: LABEL_HORIZONTAL,
                name: "horizontal".into(),
                shape: Shape::Cylinder {
                    center: xy(self.horiz_center, zc),
                    axis: [tilt.sin(), tilt.cos(), 0.0],
                    radius: self.horiz_radius * s_in,
                    half_length: self.horiz_half_length * sy,
                },
                tensor: TensorRecipe {
                    lambda: self.horiz_lambda,
                    orientation: Orientation::Axis,
                },
            },
        ];
        PhantomSpec {
            dims,
            spacing: [2.0, 2.0, 2.0],
            s0: self.s0,
            regions,
            lesions: Vec::new(),
            seed,
        }
    }
}

/// Ground truth produced by [`generate_phantom`].
#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub field: TensorField,
    /// Region label per voxel, 0 outside every region.
    pub labels: Vec<u32>,
    pub fa: ScalarMap,
    pub md: ScalarMap,
    pub color: ColorMap,
    pub eigen: EigenField,
}

impl Phantom {
    pub fn dims(&self) -> Dims {
        self.field.dims
    }

    pub fn mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    pub fn label_mask(&self, label: u32) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }
}

/// Rasterizes the spec into a tensor field with analytic FA/MD/colour maps.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.grid();
    let n = dims.len();
    let mut labels = vec![0u32; n];
    let mut region_of = vec![usize::MAX; n];
    for i in 0..n {
        let (x, y, z) = dims.coords(i);
        let p = [x as f64, y as f64, z as f64];
        for (r_idx, r) in spec.regions.iter().enumerate() {
            if r.shape.contains(p) {
                labels[i] = r.label;
                region_of[i] = r_idx;
            }
        }
    }

    let mut tensors = vec![DiffusionTensor::default(); n];
    let mut eigs = vec![EigenSystem::zero(); n];
    for i in 0..n {
        if region_of[i] == usize::MAX {
            continue;
        }
        let (x, y, z) = dims.coords(i);
        let p = [x as f64, y as f64, z as f64];
        let region = &spec.regions[region_of[i]];
        let mut lambda = region.tensor.lambda;
        for lesion in &spec.lesions {
            if lesion.region == region.label && lesion.shape.contains(p) {
                lambda = reduce_anisotropy(lambda, lesion.factor);
            }
        }
        let e1 = principal_direction(region, p);
        let frame = frame_from(e1);
        tensors[i] = DiffusionTensor::from_eigen(lambda, frame, spec.s0);
        eigs[i] = EigenSystem {
            values: lambda,
            vectors: frame,
        };
    }

    let mask: Vec<bool> = labels.iter().map(|&l| l != 0).collect();
    let spacing = spec.spacing;
    let mut fa = ScalarMap::zeros(dims, spacing);
    let mut md = ScalarMap::zeros(dims, spacing);
    let mut color = ColorMap::zeros(dims, spacing);
    for i in 0..n {
        if mask[i] {
            let l = eigs[i].values;
            let f = fa_from_values(l);
            fa.data[i] = f;
            md.data[i] = (l[0] + l[1] + l[2]) / 3.0;
            color.data[i] = colormap_voxel(&eigs[i], f);
        }
    }
    fa.mask = mask.clone();
    md.mask = mask.clone();
    color.mask = mask.clone();
    Ok(Phantom {
        spec: spec.clone(),
        field: TensorField {
            dims,
            spacing,
            tensors,
        },
        labels,
        fa,
        md,
        color,
        eigen: EigenField {
            dims,
            spacing,
            eigs,
            mask,
        },
    })
}

fn principal_direction(region: &Region, p: [f64; 3]) -> [f64; 3] {
    match (&region.tensor.orientation, &region.shape) {
        (Orientation::Axis, Shape::Cylinder { axis, .. }) => unit(*axis),
        (Orientation::Tangent, Shape::Arc { center, .. }) => arc_tangent(*center, p),
        (Orientation::Fixed { dir }, _) => unit(*dir),
        _ => [1.0, 0.0, 0.0],
    }
}

/// Unit tangent of the circle around `center` (counter-clockwise in x-y).
pub fn arc_tangent(center: [f64; 3], p: [f64; 3]) -> [f64; 3] {
    let theta = (p[1] - center[1]).atan2(p[0] - center[0]);
    [-theta.sin(), theta.cos(), 0.0]
}

/// Orthonormal frame whose first axis is `e1`.
fn frame_from(e1: [f64; 3]) -> [[f64; 3]; 3] {
    let helper = if e1[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
    let e2 = unit(cross(e1, helper));
    let e3 = cross(e1, e2);
    [e1, e2, e3]
}

/// Moves eigenvalues toward their mean so FA becomes `factor` times the
/// original while the mean diffusivity is unchanged.
pub fn reduce_anisotropy(lambda: [f64; 3], factor: f64) -> [f64; 3] {
    if factor == 1.0 {
        return lambda;
    }
    let mean = (lambda[0] + lambda[1] + lambda[2]) / 3.0;
    let dev = lambda.map(|l| l - mean);
    let a = dev.iter().map(|d| d * d).sum::<f64>();
    if a == 0.0 {
        return lambda;
    }
    let target = factor * fa_from_values(lambda);
    let m = 3.0 * mean * mean;
    let t = (target * target * m / (a * (1.5 - target * target))).sqrt();
    dev.map(|d| mean + t * d)
}

/// Lesion applied to an existing field (eigenvectors kept, eigenvalues pulled
/// toward their mean).
pub fn inject_lesion(field: &TensorField, labels: &[u32], lesion: &LesionSpec) -> TensorField {
    let mut out = field.clone();
    if lesion.factor == 1.0 {
        return out;
    }
    for i in 0..field.dims.len() {
        if labels[i] != lesion.region {
            continue;
        }
        let (x, y, z) = field.dims.coords(i);
        if !lesion.shape.contains([x as f64, y as f64, z as f64]) {
            continue;
        }
        let t = &field.tensors[i];
        let e = eig3_sym(t);
        let lambda = reduce_anisotropy(e.values, lesion.factor);
        out.tensors[i] = DiffusionTensor::from_eigen(lambda, e.vectors, t.s0);
    }
    out
}

/// Source of the unweighted signal used by [`synthesize_dwi`].
#[derive(Debug, Clone, Copy)]
pub enum SignalScale<'a> {
    /// The `s0` stored in each tensor.
    FromField,
    Uniform(f64),
    Map(&'a [f64]),
}

pub fn synthesize_dwi(field: &TensorField, scheme: &GradientScheme, s0: SignalScale<'_>) -> Result<DwiVolume> {
    let n = field.dims.len();
    if let SignalScale::Map(m) = s0 {
        if m.len() != n {
            return Err(Error::Shape(format!("s0 map has {} values for {} voxels", m.len(), n)));
        }
    }
    let mut dwi = DwiVolume::zeros(field.dims, field.spacing, scheme.len(), scheme.fingerprint());
    for (i, t) in field.tensors.iter().enumerate() {
        let mut t = *t;
        t.s0 = match s0 {
            SignalScale::FromField => t.s0,
            SignalScale::Uniform(v) => v,
            SignalScale::Map(m) => m[i],
        };
        for (m, s) in dti::predict_signal(&t, scheme).into_iter().enumerate() {
            dwi.data[m * n + i] = s;
        }
    }
    Ok(dwi)
}

/// Noise level actually applied by [`add_rician_noise`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseInfo {
    pub snr_db: f64,
    /// Mean foreground b=0 signal the SNR refers to.
    pub reference_signal: f64,
    pub sigma: f64,
}

/// σ = S_ref / 10^(snr_db/20) with S_ref the mean foreground b=0 signal, then
/// every sample becomes |S + n1 + i·n2|.
pub fn add_rician_noise(
    dwi: &DwiVolume,
    scheme: &GradientScheme,
    snr_db: f64,
    seed: u64,
) -> Result<(DwiVolume, NoiseInfo)> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::InvalidArgument(format!("snr {snr_db} dB")));
    }
    if dwi.n_meas != scheme.len() {
        return Err(Error::Shape("dwi and scheme differ in measurement count".into()));
    }
    let mask = dti::foreground_mask(dwi, scheme);
    let b0 = dti::mean_b0(dwi, scheme);
    let (sum, count) = b0
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, c), (v, _)| (s + v, c + 1));
    let reference_signal = if count > 0 { sum / count as f64 } else { 0.0 };
    if snr_db == f64::INFINITY {
        return Ok((
            dwi.clone(),
            NoiseInfo {
                snr_db,
                reference_signal,
                sigma: 0.0,
            },
        ));
    }
    let sigma = reference_signal / 10f64.powf(snr_db / 20.0);
    Ok((
        add_rician_noise_sigma(dwi, sigma, seed),
        NoiseInfo {
            snr_db,
            reference_signal,
            sigma,
        },
    ))
}

/// Rician corruption at an explicit σ. Each voxel draws from its own ChaCha
/// stream so the result does not depend on thread scheduling.
pub fn add_rician_noise_sigma(dwi: &DwiVolume, sigma: f64, seed: u64) -> DwiVolume {
    let n = dwi.dims.len();
    let base = ChaCha8Rng::seed_from_u64(seed);
    let noisy: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = base.clone();
            rng.set_stream(i as u64);
            (0..dwi.n_meas)
                .map(|m| {
                    let s = dwi.data[m * n + i];
                    let n1: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
                    let n2: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
                    ((s + n1).powi(2) + n2 * n2).sqrt()
                })
                .collect()
        })
        .collect();
    let mut out = dwi.clone();
    for (i, v) in noisy.into_iter().enumerate() {
        for (m, s) in v.into_iter().enumerate() {
            out.data[m * n + i] = s;
        }
    }
    out
}

/// Rigid in-plane motion (shift in pixels, rotation in degrees about the slice
/// centre) applied to the listed weighted volumes with bilinear resampling.
pub fn apply_motion(
    dwi: &DwiVolume,
    scheme: &GradientScheme,
    volumes: &[usize],
    shift: [f64; 2],
    rotation_deg: f64,
) -> Result<DwiVolume> {
    for &v in volumes {
        if v >= dwi.n_meas {
            return Err(Error::InvalidArgument(format!(
                "volume index {v} out of range (stack has {})",
                dwi.n_meas
            )));
        }
        if scheme.entries().get(v).map_or(true, |m| m.b == 0.0) {
            return Err(Error::InvalidArgument(format!("volume {v} is not diffusion weighted")));
        }
    }
    let mut out = dwi.clone();
    let dims = dwi.dims;
    let plane = dims.slice_len();
    for &v in volumes {
        let src = dwi.volume(v);
        let dst = out.volume_mut(v);
        for z in 0..dims.nz {
            let moved = transform_slice(
                &src[z * plane..(z + 1) * plane],
                dims.nx,
                dims.ny,
                shift,
                rotation_deg,
            );
            dst[z * plane..(z + 1) * plane].copy_from_slice(&moved);
        }
    }
    Ok(out)
}

/// Output(p) = input(R⁻¹(p − c − t) + c), zero outside the image.
pub fn transform_slice(img: &[f64], nx: usize, ny: usize, shift: [f64; 2], rotation_deg: f64) -> Vec<f64> {
    let (s, c) = rotation_deg.to_radians().sin_cos();
    let cx = (nx as f64 - 1.0) / 2.0;
    let cy = (ny as f64 - 1.0) / 2.0;
    let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
    let sample = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x as usize >= nx || y as usize >= ny {
            0.0
        } else {
            img[y as usize * nx + x as usize]
        }
    };
    let mut out = vec![0.0; nx * ny];
    for y in 0..ny {
        for x in 0..nx {
            let dx = x as f64 - cx - shift[0];
            let dy = y as f64 - cy - shift[1];
            let sx = snap(c * dx + s * dy + cx);
            let sy = snap(-s * dx + c * dy + cy);
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            let mut v = 0.0;
            for (ox, oy, w) in [
                (0, 0, (1.0 - fx) * (1.0 - fy)),
                (1, 0, fx * (1.0 - fy)),
                (0, 1, (1.0 - fx) * fy),
                (1, 1, fx * fy),
            ] {
                if w != 0.0 {
                    v += w * sample(x0 + ox, y0 + oy);
                }
            }
            out[y * nx + x] = v;
        }
    }
    out
}

/// Trace of the direction optimizer, one energy value per iteration.
#[derive(Debug, Clone)]
pub struct SchemeTrace {
    pub scheme: GradientScheme,
    pub energies: Vec<f64>,
}

/// `m` directions on the half-sphere minimizing antipodal electrostatic
/// energy, preceded by `n_b0` unweighted entries.
pub fn generate_scheme(m: usize, b: f64, n_b0: usize, seed: u64) -> Result<GradientScheme> {
    Ok(generate_scheme_traced(m, b, n_b0, seed)?.scheme)
}

pub fn generate_scheme_traced(m: usize, b: f64, n_b0: usize, seed: u64) -> Result<SchemeTrace> {
    if m < 6 {
        return Err(Error::InvalidArgument(format!(
            "{m} directions cannot determine a tensor (need at least 6)"
        )));
    }
    if n_b0 == 0 || !(b > 0.0) {
        return Err(Error::InvalidArgument("need n_b0 ≥ 1 and b > 0".into()));
    }
    let (dirs, energies) = electrostatic_directions(m, seed, SCHEME_ITERATIONS);
    let mut entries = vec![Measurement { b: 0.0, g: [0.0; 3] }; n_b0];
    entries.extend(spread_order(&dirs).into_iter().map(|g| Measurement { b, g }));
    Ok(SchemeTrace {
        scheme: GradientScheme::new(entries)?,
        energies,
    })
}

/// Σ_{i<j} 1/|gi − gj| + 1/|gi + gj|
pub fn electrostatic_energy(dirs: &[[f64; 3]]) -> f64 {
    let mut e = 0.0;
    for i in 0..dirs.len() {
        for j in (i + 1)..dirs.len() {
            e += 1.0 / norm(sub(dirs[i], dirs[j])) + 1.0 / norm(add(dirs[i], dirs[j]));
        }
    }
    e
}

fn energy_gradient(dirs: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut g = vec![[0.0; 3]; dirs.len()];
    for i in 0..dirs.len() {
        for j in (i + 1)..dirs.len() {
            for (sign, d) in [(1.0, sub(dirs[i], dirs[j])), (-1.0, add(dirs[i], dirs[j]))] {
                // ∂(1/|d|)/∂d = −d/|d|³
                let r = norm(d);
                let f = -1.0 / (r * r * r);
                for k in 0..3 {
                    g[i][k] += f * d[k];
                    g[j][k] -= sign * f * d[k];
                }
            }
        }
    }
    g
}

/// Projected gradient descent with step halving on rejection.
fn electrostatic_directions(m: usize, seed: u64, iterations: usize) -> (Vec<[f64; 3]>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs: Vec<[f64; 3]> = (0..m)
        .map(|_| loop {
            let v: [f64; 3] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            if norm(v) > 1e-3 {
                break unit(v);
            }
        })
        .collect();
    let mut energy = electrostatic_energy(&dirs);
    let mut step = 0.1 / m as f64;
    let mut energies = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let grad = energy_gradient(&dirs);
        let gnorm = grad.iter().map(|g| dot(*g, *g)).sum::<f64>().sqrt().max(1e-300);
        let proposal: Vec<[f64; 3]> = dirs
            .iter()
            .zip(&grad)
            .map(|(d, g)| {
                let tangent = sub(*g, scale(*d, dot(*g, *d)));
                unit(sub(*d, scale(tangent, step / gnorm)))
            })
            .collect();
        let e = electrostatic_energy(&proposal);
        if e <= energy {
            dirs = proposal;
            energy = e;
            step *= 1.1;
        } else {
            step *= 0.5;
        }
        energies.push(energy);
    }
    for d in dirs.iter_mut() {
        // canonical hemisphere
        let k = (0..3).max_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs())).unwrap_or(0);
        if d[k] < 0.0 {
            *d = scale(*d, -1.0);
        }
    }
    (dirs, energies)
}

/// Greedy reordering so that every prefix is as spread out as possible.
fn spread_order(dirs: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut remaining: Vec<[f64; 3]> = dirs.to_vec();
    let mut out = vec![remaining.remove(0)];
    while !remaining.is_empty() {
        let (best, _) = remaining
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let closest = out.iter().map(|o| dot(*o, *d).abs()).fold(0.0, f64::max);
                (i, closest)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        out.push(remaining.remove(best));
    }
    out
}

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    scale(a, 1.0 / n)
}
