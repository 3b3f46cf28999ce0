//! Residual convolutional encoder-decoder mapping DWI stacks to FA, MD or
//! direction-encoded colour maps, trained patch-wise with manual
//! backpropagation and ADAM, plus a per-voxel dense baseline.

pub mod adam;
pub mod arch;
pub mod conv;
pub mod data;
pub mod gradcheck;
pub mod infer;
pub mod mlp;
pub mod train;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use arch::{Activation, ArchitectureSpec, LayerKind, LayerSpec, NetworkParams};
pub use conv::{backward, batch_loss, batch_objective, forward, forward_cached, loss, ForwardCache, Sample};
pub use data::{augment, extract_patches, normalize_subject, patch_offsets, NormalizedSubject, Patch, PatchSet};
pub use gradcheck::{grad_check, mlp_grad_check, GradCheckReport};
pub use infer::{infer_map, PredictedMap};
pub use mlp::MlpParams;
pub use train::{train_cnn, train_mlp, EpochRecord, Model, TrainConfig, TrainReport, TrainedModel};

/// Regression target of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Fa,
    Md,
    /// Direction-encoded colour map |v1|·FA (3 channels, x y z).
    Colormap,
}

impl TargetKind {
    pub fn channels(self) -> usize {
        match self {
            TargetKind::Fa | TargetKind::Md => 1,
            TargetKind::Colormap => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetKind::Fa => "fa",
            TargetKind::Md => "md",
            TargetKind::Colormap => "colormap",
        }
    }

    /// Upper clamp of de-normalized predictions (MD is unbounded above).
    pub fn upper_bound(self) -> f64 {
        match self {
            TargetKind::Fa | TargetKind::Colormap => 1.0,
            TargetKind::Md => f64::INFINITY,
        }
    }
}

impl std::str::FromStr for TargetKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "fa" => Ok(TargetKind::Fa),
            "md" => Ok(TargetKind::Md),
            "colormap" => Ok(TargetKind::Colormap),
            _ => Err(crate::Error::InvalidArgument(format!("unknown target '{s}' (fa|md|colormap)"))),
        }
    }
}

/// Trainable parameter tensors in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
    /// Whether weight decay applies to each tensor.
    fn decayed(&self) -> Vec<bool>;
}

impl Parameters for NetworkParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w.as_slice(), b.as_slice()]).collect()
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
            .collect()
    }
    fn decayed(&self) -> Vec<bool> {
        (0..2 * self.weights.len()).map(|i| i % 2 == 0).collect()
    }
}

impl Parameters for MlpParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w.as_slice(), b.as_slice()]).collect()
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
            .collect()
    }
    fn decayed(&self) -> Vec<bool> {
        (0..2 * self.weights.len()).map(|i| i % 2 == 0).collect()
    }
}

/// Gradient tensors in [`Parameters::tensors`] order (w1, b1, w2, b2, …).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like<P: Parameters>(p: &P) -> Self {
        Gradients(p.tensors().iter().map(|t| vec![0.0; t.len()]).collect())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}
