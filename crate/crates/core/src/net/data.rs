//! Subject normalization, patch tiling and augmentation.

use crate::dti::{mean_b0, foreground_mask, GradientScheme};
use crate::error::{Error, Result};
use crate::volume::{ColorMap, Dims, DwiVolume, ScalarMap, Spacing};

use super::conv::Sample;
use super::TargetKind;

pub const PATCH_SIZE: usize = 21;
/// round(21 × (1 − 0.66)).
pub const PATCH_STRIDE: usize = 7;

/// Network input channels: every weighted DWI in scheme order, then the mean
/// b0 if requested. Channel-major volumes.
pub fn input_channels(dwi: &DwiVolume, scheme: &GradientScheme, include_b0: bool) -> Result<(usize, Vec<f64>)> {
    if dwi.n_meas != scheme.len() {
        return Err(Error::Shape(format!(
            "DWI has {} volumes but scheme has {} entries",
            dwi.n_meas,
            scheme.len()
        )));
    }
    let weighted = scheme.weighted_indices();
    let mut data = Vec::with_capacity((weighted.len() + 1) * dwi.dims.len());
    for &m in &weighted {
        data.extend_from_slice(dwi.volume(m));
    }
    if include_b0 {
        data.extend(mean_b0(dwi, scheme));
    }
    Ok((weighted.len() + include_b0 as usize, data))
}

/// Channel-major target volumes for `kind`.
pub fn target_volume(kind: TargetKind, fa: &ScalarMap, md: &ScalarMap, color: &ColorMap) -> Vec<f64> {
    match kind {
        TargetKind::Fa => fa.data.clone(),
        TargetKind::Md => md.data.clone(),
        TargetKind::Colormap => (0..3).flat_map(|c| color.data.iter().map(move |v| v[c])).collect(),
    }
}

/// A subject's input stack scaled into [0, 1] and, optionally, its scaled
/// regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSubject {
    pub dims: Dims,
    pub spacing: Spacing,
    pub in_channels: usize,
    /// `in_channels × nz × ny × nx`.
    pub input: Vec<f64>,
    pub input_divisor: f64,
    pub kind: TargetKind,
    /// `kind.channels() × nz × ny × nx`, divided by `target_divisor`.
    pub target: Option<Vec<f64>>,
    pub target_divisor: f64,
    pub mask: Vec<bool>,
}

/// Divide the DWI stack by its subject-wide maximum. FA targets keep divisor
/// 1; MD and colour targets are divided by their own maximum.
pub fn normalize_subject(
    dwi: &DwiVolume,
    scheme: &GradientScheme,
    include_b0: bool,
    kind: TargetKind,
    target: Option<Vec<f64>>,
) -> Result<NormalizedSubject> {
    let (in_channels, mut input) = input_channels(dwi, scheme, include_b0)?;
    let divisor = dwi.max_value();
    if !(divisor > 0.0 && divisor.is_finite()) {
        return Err(Error::InvalidArgument("subject has no positive intensity".into()));
    }
    input.iter_mut().for_each(|v| *v /= divisor);
    let mut target_divisor = 1.0;
    let target = match target {
        Some(mut t) => {
            if t.len() != kind.channels() * dwi.dims.len() {
                return Err(Error::Shape("target volume size differs from DWI grid".into()));
            }
            if kind != TargetKind::Fa {
                let m = t.iter().cloned().fold(0.0, f64::max);
                if !(m > 0.0 && m.is_finite()) {
                    return Err(Error::InvalidArgument("target map is all zero".into()));
                }
                target_divisor = m;
                t.iter_mut().for_each(|v| *v /= m);
            }
            Some(t)
        }
        None => None,
    };
    Ok(NormalizedSubject {
        dims: dwi.dims,
        spacing: dwi.spacing,
        in_channels,
        input,
        input_divisor: divisor,
        kind,
        target,
        target_divisor,
        mask: foreground_mask(dwi, scheme),
    })
}

fn slice_of(data: &[f64], channels: usize, dims: Dims, z: usize) -> Vec<f64> {
    let (len, sl) = (dims.len(), dims.slice_len());
    (0..channels).flat_map(|c| data[c * len + z * sl..c * len + (z + 1) * sl].iter().copied()).collect()
}

impl NormalizedSubject {
    pub fn input_slice(&self, z: usize) -> Vec<f64> {
        slice_of(&self.input, self.in_channels, self.dims, z)
    }

    pub fn target_slice(&self, z: usize) -> Option<Vec<f64>> {
        self.target.as_ref().map(|t| slice_of(t, self.kind.channels(), self.dims, z))
    }

    /// Re-express the target against a different divisor (shared across a
    /// training set so that one stored divisor de-normalizes every subject).
    pub fn rescale_target(&mut self, divisor: f64) -> Result<()> {
        if !(divisor > 0.0 && divisor.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid target divisor {divisor}")));
        }
        let f = self.target_divisor / divisor;
        if let Some(t) = self.target.as_mut() {
            t.iter_mut().for_each(|v| *v *= f);
        }
        self.target_divisor = divisor;
        Ok(())
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.target_divisor
    }
}

/// Patch origins along one axis: multiples of `stride`, plus an
/// edge-anchored last origin so the far border is covered.
pub fn patch_offsets(n: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if patch == 0 || stride == 0 {
        return Err(Error::InvalidArgument("patch size and stride must be positive".into()));
    }
    if n < patch {
        return Err(Error::Shape(format!("slice extent {n} smaller than patch {patch}")));
    }
    let mut v: Vec<usize> = (0..=n - patch).step_by(stride).collect();
    if *v.last().expect("n ≥ patch") != n - patch {
        v.push(n - patch);
    }
    Ok(v)
}

/// Crop every tile of a `channels × h × w` stack. Returns `(y, x, tile)`.
pub fn extract_patches(
    stack: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    patch: usize,
    stride: usize,
) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    if stack.len() != channels * h * w {
        return Err(Error::Shape("stack length differs from channels×h×w".into()));
    }
    let ys = patch_offsets(h, patch, stride)?;
    let xs = patch_offsets(w, patch, stride)?;
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for &y0 in &ys {
        for &x0 in &xs {
            out.push((y0, x0, crop(stack, channels, h, w, y0, x0, patch)));
        }
    }
    Ok(out)
}

fn crop(stack: &[f64], channels: usize, h: usize, w: usize, y0: usize, x0: usize, p: usize) -> Vec<f64> {
    let mut t = Vec::with_capacity(channels * p * p);
    for c in 0..channels {
        for y in y0..y0 + p {
            let row = (c * h + y) * w;
            t.extend_from_slice(&stack[row + x0..row + x0 + p]);
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    /// (subject index, slice z).
    pub source: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub size: usize,
    pub in_channels: usize,
    pub kind: TargetKind,
    pub patches: Vec<Patch>,
}

impl PatchSet {
    /// Tile the chosen slices of every subject. Subjects must carry targets.
    pub fn from_subjects(subjects: &[NormalizedSubject], slices: &[usize], patch: usize, stride: usize) -> Result<Self> {
        let first = subjects
            .first()
            .ok_or_else(|| Error::InvalidArgument("no subjects".into()))?;
        let mut set = PatchSet {
            size: patch,
            in_channels: first.in_channels,
            kind: first.kind,
            patches: Vec::new(),
        };
        for (si, s) in subjects.iter().enumerate() {
            if s.in_channels != set.in_channels || s.kind != set.kind {
                return Err(Error::Shape("subjects disagree on channel layout".into()));
            }
            let (h, w) = (s.dims.ny, s.dims.nx);
            for &z in slices {
                if z >= s.dims.nz {
                    return Err(Error::InvalidArgument(format!("slice {z} outside subject {si}")));
                }
                let tin = s.input_slice(z);
                let tout = s
                    .target_slice(z)
                    .ok_or_else(|| Error::InvalidArgument(format!("subject {si} has no target")))?;
                let ins = extract_patches(&tin, s.in_channels, h, w, patch, stride)?;
                let outs = extract_patches(&tout, s.kind.channels(), h, w, patch, stride)?;
                for ((_, _, i), (_, _, t)) in ins.into_iter().zip(outs) {
                    set.patches.push(Patch {
                        input: i,
                        target: t,
                        source: (si, z),
                    });
                }
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn sample(&self, i: usize) -> Sample<'_> {
        let p = &self.patches[i];
        Sample {
            input: &p.input,
            target: &p.target,
            h: self.size,
            w: self.size,
        }
    }
}

/// Rotate every channel of a `channels × s × s` image by 90°:
/// out(y, x) = in(x, s−1−y).
pub fn rot90(img: &[f64], channels: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for c in 0..channels {
        let base = c * s * s;
        for y in 0..s {
            for x in 0..s {
                out[base + y * s + x] = img[base + x * s + (s - 1 - y)];
            }
        }
    }
    out
}

/// Left-right flip: out(y, x) = in(y, s−1−x).
pub fn flip_lr(img: &[f64], channels: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for c in 0..channels {
        let base = c * s * s;
        for y in 0..s {
            for x in 0..s {
                out[base + y * s + x] = img[base + y * s + (s - 1 - x)];
            }
        }
    }
    out
}

/// Swap the x and y channels of a colour target (in-plane 90° rotation
/// exchanges |v_x| and |v_y|).
fn swap_xy(img: &[f64], s: usize) -> Vec<f64> {
    let n = s * s;
    let mut out = img.to_vec();
    out[..n].copy_from_slice(&img[n..2 * n]);
    out[n..2 * n].copy_from_slice(&img[..n]);
    out
}

/// The 8 dihedral variants of every patch (rotations 0–270°, each with and
/// without a left-right flip), applied identically to input and target.
pub fn augment(set: &PatchSet) -> PatchSet {
    let s = set.size;
    let (ci, co) = (set.in_channels, set.kind.channels());
    let color = set.kind == TargetKind::Colormap;
    let mut patches = Vec::with_capacity(set.patches.len() * 8);
    for p in &set.patches {
        let (mut inp, mut tgt) = (p.input.clone(), p.target.clone());
        for r in 0..4 {
            if r > 0 {
                inp = rot90(&inp, ci, s);
                tgt = rot90(&tgt, co, s);
                if color {
                    tgt = swap_xy(&tgt, s);
                }
            }
            patches.push(Patch {
                input: inp.clone(),
                target: tgt.clone(),
                source: p.source,
            });
            patches.push(Patch {
                input: flip_lr(&inp, ci, s),
                target: flip_lr(&tgt, co, s),
                source: p.source,
            });
        }
    }
    PatchSet {
        size: s,
        in_channels: ci,
        kind: set.kind,
        patches,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dti::Measurement;

    fn ramp(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 * 0.01).collect()
    }

    #[test]
    fn offsets_and_counts() {
        assert_eq!(patch_offsets(49, 21, 7).unwrap(), vec![0, 7, 14, 21, 28]);
        assert_eq!(patch_offsets(21, 21, 7).unwrap(), vec![0]);
        assert_eq!(patch_offsets(48, 21, 7).unwrap(), vec![0, 7, 14, 21, 27]);
        assert!(patch_offsets(20, 21, 7).is_err());
        let stack = ramp(49 * 49);
        assert_eq!(extract_patches(&stack, 1, 49, 49, 21, 7).unwrap().len(), 25);
        assert_eq!(extract_patches(&ramp(21 * 21), 1, 21, 21, 21, 7).unwrap().len(), 1);
    }

    #[test]
    fn patches_cover_every_pixel() {
        for (h, w) in [(49, 49), (48, 30), (21, 64), (50, 22)] {
            let mut hit = vec![false; h * w];
            for (y0, x0, _) in extract_patches(&ramp(h * w), 1, h, w, 21, 7).unwrap() {
                for y in y0..y0 + 21 {
                    for x in x0..x0 + 21 {
                        hit[y * w + x] = true;
                    }
                }
            }
            assert!(hit.iter().all(|&b| b), "{h}×{w}");
        }
    }

    #[test]
    fn crop_matches_source() {
        let (h, w) = (30, 25);
        let stack = ramp(2 * h * w);
        for (y0, x0, t) in extract_patches(&stack, 2, h, w, 21, 7).unwrap() {
            assert_eq!(t[21 * 21 + 3 * 21 + 5], stack[(h + y0 + 3) * w + x0 + 5]);
        }
    }

    #[test]
    fn dihedral_identities() {
        let img = ramp(2 * 21 * 21);
        let mut r = img.clone();
        for _ in 0..4 {
            r = rot90(&r, 2, 21);
        }
        assert_eq!(r, img);
        assert_eq!(flip_lr(&flip_lr(&img, 2, 21), 2, 21), img);
        assert_ne!(rot90(&img, 2, 21), img);
    }

    fn color_set() -> PatchSet {
        let s = 21;
        let target: Vec<f64> = (0..3 * s * s).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        PatchSet {
            size: s,
            in_channels: 2,
            kind: TargetKind::Colormap,
            patches: vec![
                Patch {
                    input: ramp(2 * s * s),
                    target: target.clone(),
                    source: (0, 0),
                },
                Patch {
                    input: ramp(2 * s * s).iter().map(|v| 1.0 - v).collect(),
                    target,
                    source: (0, 1),
                },
            ],
        }
    }

    #[test]
    fn augment_expands_eightfold_with_paired_transforms() {
        let set = color_set();
        let aug = augment(&set);
        assert_eq!(aug.len(), 8 * set.len());
        let s = set.size;
        // every rotated input is accompanied by its rotated, channel-swapped target
        for p in &set.patches {
            let ri = rot90(&p.input, 2, s);
            let rt = swap_xy(&rot90(&p.target, 3, s), s);
            assert!(aug.patches.iter().any(|q| q.input == ri && q.target == rt));
            let fi = flip_lr(&p.input, 2, s);
            let ft = flip_lr(&p.target, 3, s);
            assert!(aug.patches.iter().any(|q| q.input == fi && q.target == ft));
        }
    }

    fn tiny_subject() -> (DwiVolume, GradientScheme) {
        let scheme = GradientScheme::new(vec![
            Measurement { b: 0.0, g: [0.0; 3] },
            Measurement { b: 1000.0, g: [1.0, 0.0, 0.0] },
        ])
        .unwrap();
        let dims = Dims::new(3, 2, 1);
        let mut dwi = DwiVolume::zeros(dims, [1.0; 3], 2, "t");
        dwi.volume_mut(0).copy_from_slice(&[2.0, 1.0, 2.0, 1.0, 2.0, 1.0]);
        dwi.volume_mut(1).copy_from_slice(&[1.0, 0.5, 1.0, 0.5, 1.0, 0.25]);
        (dwi, scheme)
    }

    #[test]
    fn normalization_examples() {
        let (dwi, scheme) = tiny_subject();
        let md: Vec<f64> = vec![1e-3, 2e-3, 0.5e-3, 0.0, 1e-3, 3e-3];
        let n = normalize_subject(&dwi, &scheme, true, TargetKind::Md, Some(md.clone())).unwrap();
        assert_eq!(n.in_channels, 2);
        // weighted DWI first, max = 2.0, voxel 1.0 → 0.5
        assert_eq!(n.input[0], 0.5);
        assert_eq!(n.input[6], 1.0);
        assert!((n.target_divisor - 3e-3).abs() < 1e-18);
        for (i, &v) in md.iter().enumerate() {
            assert!((n.denormalize(n.target.as_ref().unwrap()[i]) - v).abs() < 1e-12);
        }
        // FA is not rescaled
        let fa = vec![0.1; 6];
        let f = normalize_subject(&dwi, &scheme, false, TargetKind::Fa, Some(fa.clone())).unwrap();
        assert_eq!(f.target.unwrap(), fa);
        assert_eq!(f.in_channels, 1);
    }

    #[test]
    fn normalized_stack_is_fixed_point() {
        let (mut dwi, scheme) = tiny_subject();
        let m = dwi.max_value();
        dwi.data.iter_mut().for_each(|v| *v /= m);
        let n = normalize_subject(&dwi, &scheme, false, TargetKind::Fa, None).unwrap();
        assert_eq!(n.input_divisor, 1.0);
        assert_eq!(n.input, dwi.volume(1).to_vec());
    }

    #[test]
    fn all_zero_subject_rejected() {
        let (mut dwi, scheme) = tiny_subject();
        dwi.data.fill(0.0);
        assert!(normalize_subject(&dwi, &scheme, true, TargetKind::Fa, None).is_err());
        let (dwi, scheme) = tiny_subject();
        assert!(normalize_subject(&dwi, &scheme, true, TargetKind::Md, Some(vec![0.0; 6])).is_err());
    }

    #[test]
    fn rescale_round_trip() {
        let (dwi, scheme) = tiny_subject();
        let md: Vec<f64> = vec![1e-3, 2e-3, 0.5e-3, 0.0, 1e-3, 3e-3];
        let mut n = normalize_subject(&dwi, &scheme, true, TargetKind::Md, Some(md.clone())).unwrap();
        n.rescale_target(5e-3).unwrap();
        for (i, &v) in md.iter().enumerate() {
            assert!((n.denormalize(n.target.as_ref().unwrap()[i]) - v).abs() < 1e-15);
        }
    }
}
