use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    /// Stride-1 deconvolution with truncation; computed as a size-preserving
    /// correlation.
    Deconv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
    /// 1-based index `s` of an earlier layer whose output is added to this
    /// layer's input: H_l = σ(W_l ∗ (H_{l−1} + H_s) + B_l) with s = L − l.
    pub skip_from: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub layers: Vec<LayerSpec>,
}

/// Number of skip connections in the default encoder-decoder.
pub const CONVEYING_PATHS: usize = 4;

impl ArchitectureSpec {
    /// Validated architecture. Enforces size preservation (odd kernel,
    /// stride 1, padding (k−1)/2), ReLU everywhere except a linear last layer,
    /// and the skip-shape law.
    pub fn new(in_channels: usize, out_channels: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        let a = ArchitectureSpec {
            in_channels,
            out_channels,
            layers,
        };
        a.validate()?;
        Ok(a)
    }

    /// Residual encoder-decoder: `depth / 2` conv layers then deconv layers,
    /// all `width` filters of 3×3 (stride 1, padding 1) except the output
    /// layer, with the four innermost symmetric skip paths
    /// (for depth 10: 1→9, 2→8, 3→7, 4→6).
    pub fn encoder_decoder(in_channels: usize, out_channels: usize, width: usize, depth: usize) -> Result<Self> {
        if depth < 2 * CONVEYING_PATHS + 2 {
            return Err(Error::Architecture(format!(
                "depth {depth} cannot host {CONVEYING_PATHS} skip paths (need ≥ {})",
                2 * CONVEYING_PATHS + 2
            )));
        }
        let layers = (1..=depth)
            .map(|l| {
                let last = l == depth;
                let source = depth - l;
                LayerSpec {
                    kind: if l <= depth / 2 { LayerKind::Conv } else { LayerKind::Deconv },
                    filters: if last { out_channels } else { width },
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    activation: if last { Activation::None } else { Activation::Relu },
                    skip_from: if !last && (1..=CONVEYING_PATHS).contains(&source) {
                        Some(source)
                    } else {
                        None
                    },
                }
            })
            .collect();
        let a = Self::new(in_channels, out_channels, layers)?;
        debug_assert_eq!(a.skip_count(), CONVEYING_PATHS);
        Ok(a)
    }

    /// Plain stack of 3×3 conv layers without skips (useful for tests).
    pub fn plain(in_channels: usize, out_channels: usize, width: usize, depth: usize) -> Result<Self> {
        let layers = (1..=depth)
            .map(|l| {
                let last = l == depth;
                LayerSpec {
                    kind: LayerKind::Conv,
                    filters: if last { out_channels } else { width },
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    activation: if last { Activation::None } else { Activation::Relu },
                    skip_from: None,
                }
            })
            .collect();
        Self::new(in_channels, out_channels, layers)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn skip_count(&self) -> usize {
        self.layers.iter().filter(|l| l.skip_from.is_some()).count()
    }

    /// Channels of H_l (H_0 is the input).
    pub fn channels_of(&self, l: usize) -> usize {
        if l == 0 {
            self.in_channels
        } else {
            self.layers[l - 1].filters
        }
    }

    /// Spatial reach of one output pixel, in pixels.
    pub fn receptive_field(&self) -> usize {
        1 + self.layers.iter().map(|l| l.kernel - 1).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.layers.len();
        if depth == 0 {
            return Err(Error::Architecture("no layers".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Architecture("channel counts must be positive".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let l = i + 1;
            if layer.filters == 0 {
                return Err(Error::Architecture(format!("layer {l} has no filters")));
            }
            if layer.kernel % 2 == 0 || layer.stride != 1 || layer.padding != (layer.kernel - 1) / 2 {
                return Err(Error::Architecture(format!(
                    "layer {l}: kernel {} stride {} padding {} does not preserve spatial size",
                    layer.kernel, layer.stride, layer.padding
                )));
            }
            let want = if l == depth { Activation::None } else { Activation::Relu };
            if layer.activation != want {
                return Err(Error::Architecture(format!(
                    "layer {l}: only the last layer is linear, all others use ReLU"
                )));
            }
            if let Some(s) = layer.skip_from {
                if s != depth - l || s == 0 || s + 1 >= l {
                    return Err(Error::Architecture(format!(
                        "layer {l}: skip source {s} must be L − l = {} and precede layer {}",
                        depth - l,
                        l - 1
                    )));
                }
                if self.channels_of(s) != self.channels_of(l - 1) {
                    return Err(Error::Architecture(format!(
                        "layer {l}: skip adds H_{s} ({} channels) to H_{} ({} channels)",
                        self.channels_of(s),
                        l - 1,
                        self.channels_of(l - 1)
                    )));
                }
            }
        }
        if self.layers[depth - 1].filters != self.out_channels {
            return Err(Error::Architecture("last layer filters must equal output channels".into()));
        }
        Ok(())
    }
}

/// Weights `[out][in][ky][kx]` and biases per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub arch: ArchitectureSpec,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl NetworkParams {
    pub fn zeros(arch: &ArchitectureSpec) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, layer) in arch.layers.iter().enumerate() {
            let fan_in = arch.channels_of(i) * layer.kernel * layer.kernel;
            weights.push(vec![0.0; layer.filters * fan_in]);
            biases.push(vec![0.0; layer.filters]);
        }
        NetworkParams {
            arch: arch.clone(),
            weights,
            biases,
        }
    }

    /// He-normal weights, zero biases.
    pub fn init(arch: &ArchitectureSpec, seed: u64) -> Self {
        let mut p = Self::zeros(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, layer) in arch.layers.iter().enumerate() {
            let fan_in = (arch.channels_of(i) * layer.kernel * layer.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            for w in p.weights[i].iter_mut() {
                *w = normal.sample(&mut rng);
            }
        }
        p
    }

    pub fn fan_in(&self, layer: usize) -> usize {
        let l = &self.arch.layers[layer];
        self.arch.channels_of(layer) * l.kernel * l.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).flatten().all(|v| v.is_finite())
    }

    pub fn check_shapes(&self) -> Result<()> {
        self.arch.validate()?;
        if self.weights.len() != self.arch.depth() || self.biases.len() != self.arch.depth() {
            return Err(Error::Shape("parameter list length differs from layer count".into()));
        }
        for (i, layer) in self.arch.layers.iter().enumerate() {
            if self.weights[i].len() != layer.filters * self.fan_in(i) || self.biases[i].len() != layer.filters {
                return Err(Error::Shape(format!("layer {} parameter shape mismatch", i + 1)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_net_has_four_paths() {
        let a = ArchitectureSpec::encoder_decoder(7, 1, 64, 10).unwrap();
        assert_eq!(a.skip_count(), 4);
        let pairs: Vec<(usize, usize)> = a
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.skip_from.map(|s| (s, i + 1)))
            .collect();
        // source s feeds layer l = L − s
        assert_eq!(pairs, vec![(4, 6), (3, 7), (2, 8), (1, 9)]);
        assert_eq!(a.layers[9].activation, Activation::None);
        assert!(a.layers[..9].iter().all(|l| l.activation == Activation::Relu));
        assert!(a.layers.iter().all(|l| l.kernel == 3 && l.stride == 1 && l.padding == 1));
        assert_eq!(a.layers[0].filters, 64);
        assert_eq!(a.receptive_field(), 21);
    }

    #[test]
    fn shallow_depth_rejected_for_encoder_decoder() {
        assert!(ArchitectureSpec::encoder_decoder(7, 1, 8, 8).is_err());
        assert!(ArchitectureSpec::encoder_decoder(7, 1, 8, 12).is_ok());
    }

    #[test]
    fn mismatched_skip_rejected() {
        let mut a = ArchitectureSpec::encoder_decoder(7, 1, 8, 10).unwrap();
        a.layers[3].filters = 5; // H_4 now differs from H_5
        assert!(a.validate().is_err());
        let mut a = ArchitectureSpec::encoder_decoder(7, 1, 8, 10).unwrap();
        a.layers[6].skip_from = Some(2); // must be L − l = 3
        assert!(a.validate().is_err());
        let mut a = ArchitectureSpec::plain(3, 1, 4, 3).unwrap();
        a.layers[2].activation = Activation::Relu;
        assert!(a.validate().is_err());
        let mut a = ArchitectureSpec::plain(3, 1, 4, 3).unwrap();
        a.layers[0].padding = 0;
        assert!(a.validate().is_err());
    }

    #[test]
    fn small_nets_with_fewer_skips_are_accepted() {
        let mut a = ArchitectureSpec::plain(2, 1, 8, 4).unwrap();
        a.layers[2].skip_from = Some(1);
        assert!(a.validate().is_ok());
    }

    #[test]
    fn init_is_seeded() {
        let a = ArchitectureSpec::encoder_decoder(7, 1, 8, 10).unwrap();
        assert_eq!(NetworkParams::init(&a, 3), NetworkParams::init(&a, 3));
        assert_ne!(NetworkParams::init(&a, 3), NetworkParams::init(&a, 4));
        assert!(NetworkParams::init(&a, 3).check_shapes().is_ok());
    }
}
