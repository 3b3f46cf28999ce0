//! Whole-subject inference by overlapping patch stitching.

use rayon::prelude::*;

use super::conv::forward;
use super::data::{extract_patches, normalize_subject, NormalizedSubject};
use super::train::{Model, TrainedModel};
use super::TargetKind;
use crate::dti::GradientScheme;
use crate::error::{Error, Result};
use crate::volume::{ColorMap, DwiVolume, ScalarMap};

#[derive(Debug, Clone, PartialEq)]
pub enum PredictedMap {
    Scalar(ScalarMap),
    Color(ColorMap),
}

impl PredictedMap {
    pub fn as_scalar(&self) -> Option<&ScalarMap> {
        match self {
            PredictedMap::Scalar(m) => Some(m),
            PredictedMap::Color(_) => None,
        }
    }

    pub fn as_color(&self) -> Option<&ColorMap> {
        match self {
            PredictedMap::Color(m) => Some(m),
            PredictedMap::Scalar(_) => None,
        }
    }
}

/// Predict one `channels × h × w` slice by averaging every overlapping
/// patch prediction with uniform weight.
pub fn stitch_slice(
    params: &super::NetworkParams,
    stack: &[f64],
    h: usize,
    w: usize,
    patch: usize,
    stride: usize,
) -> Result<Vec<f64>> {
    let ci = params.arch.in_channels;
    let co = params.arch.out_channels;
    let tiles = extract_patches(stack, ci, h, w, patch, stride)?;
    let preds: Vec<Result<Vec<f64>>> = tiles.par_iter().map(|(_, _, t)| forward(params, t, patch, patch)).collect();
    let mut sum = vec![0.0; co * h * w];
    let mut count = vec![0u32; h * w];
    for ((y0, x0, _), pred) in tiles.iter().zip(preds) {
        let pred = pred?;
        for y in 0..patch {
            for x in 0..patch {
                let pix = (y0 + y) * w + x0 + x;
                count[pix] += 1;
                for c in 0..co {
                    sum[c * h * w + pix] += pred[(c * patch + y) * patch + x];
                }
            }
        }
    }
    for c in 0..co {
        for (s, &n) in sum[c * h * w..(c + 1) * h * w].iter_mut().zip(&count) {
            *s /= n as f64;
        }
    }
    Ok(sum)
}

/// Raw network output for a normalized subject, channel-major, in
/// normalized units.
pub fn predict_normalized(model: &TrainedModel, subject: &NormalizedSubject) -> Result<Vec<f64>> {
    let dims = subject.dims;
    let co = model.kind.channels();
    let len = dims.len();
    let mut out = vec![0.0; co * len];
    match &model.model {
        Model::Cnn(p) => {
            if p.arch.in_channels != subject.in_channels || p.arch.out_channels != co {
                return Err(Error::Shape("subject channels differ from the network".into()));
            }
            let (h, w, sl) = (dims.ny, dims.nx, dims.slice_len());
            for z in 0..dims.nz {
                let pred = stitch_slice(p, &subject.input_slice(z), h, w, model.patch_size, model.patch_stride)?;
                for c in 0..co {
                    out[c * len + z * sl..c * len + (z + 1) * sl].copy_from_slice(&pred[c * sl..(c + 1) * sl]);
                }
            }
        }
        Model::Mlp(p) => {
            let ci = subject.in_channels;
            if p.inputs() != ci || p.outputs() != co {
                return Err(Error::Shape("subject channels differ from the network".into()));
            }
            let voxels: Vec<usize> = (0..len).filter(|&i| subject.mask[i]).collect();
            let chunks: Vec<Result<Vec<f64>>> = voxels
                .par_chunks(1024)
                .map(|chunk| {
                    let x: Vec<f64> = chunk
                        .iter()
                        .flat_map(|&i| (0..ci).map(move |c| subject.input[c * len + i]))
                        .collect();
                    p.forward(&x, chunk.len())
                })
                .collect();
            for (chunk, pred) in voxels.chunks(1024).zip(chunks) {
                let pred = pred?;
                for (k, &i) in chunk.iter().enumerate() {
                    for c in 0..co {
                        out[c * len + i] = pred[k * co + c];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Predict the model's target map for a DWI set: normalize, infer, scale by
/// the stored divisor, clamp to the valid range and zero the background.
pub fn infer_map(model: &TrainedModel, dwi: &DwiVolume, scheme: &GradientScheme) -> Result<PredictedMap> {
    if scheme.weighted_count() != model.n_weighted {
        return Err(Error::Shape(format!(
            "model expects {} weighted DWIs, scheme has {}",
            model.n_weighted,
            scheme.weighted_count()
        )));
    }
    let subject = normalize_subject(dwi, scheme, model.include_b0, model.kind, None)?;
    let raw = predict_normalized(model, &subject)?;
    let len = dwi.dims.len();
    let hi = model.kind.upper_bound();
    let value = |c: usize, i: usize| {
        if subject.mask[i] {
            (raw[c * len + i] * model.target_divisor).clamp(0.0, hi)
        } else {
            0.0
        }
    };
    Ok(match model.kind {
        TargetKind::Fa | TargetKind::Md => PredictedMap::Scalar(ScalarMap::from_parts(
            dwi.dims,
            dwi.spacing,
            (0..len).map(|i| value(0, i)).collect(),
            subject.mask.clone(),
        )?),
        TargetKind::Colormap => {
            let mut m = ColorMap::zeros(dwi.dims, dwi.spacing);
            for i in 0..len {
                m.data[i] = [value(0, i), value(1, i), value(2, i)];
            }
            m.mask = subject.mask.clone();
            PredictedMap::Color(m)
        }
    })
}
