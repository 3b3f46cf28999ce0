//! Per-voxel fully connected baseline: q-vector in, target value(s) out.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::conv::gemm;
use super::Gradients;
use crate::error::{Error, Result};

pub const MLP_HIDDEN: [usize; 3] = [150, 150, 150];

/// Dense layers; `weights[i]` is `sizes[i+1] × sizes[i]` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpParams {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Architecture(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(MlpParams {
            sizes: sizes.to_vec(),
            weights: sizes.windows(2).map(|p| vec![0.0; p[0] * p[1]]).collect(),
            biases: sizes[1..].iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    /// Three hidden layers of 150 ReLU units.
    pub fn baseline(inputs: usize, outputs: usize, seed: u64) -> Result<Self> {
        let mut sizes = vec![inputs];
        sizes.extend(MLP_HIDDEN);
        sizes.push(outputs);
        Self::init(&sizes, seed)
    }

    /// He-normal weights, zero biases.
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut p = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, w) in p.weights.iter_mut().enumerate() {
            let normal = Normal::new(0.0, (2.0 / sizes[i] as f64).sqrt()).expect("finite std");
            w.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
        Ok(p)
    }

    pub fn inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.sizes.last().expect("validated")
    }

    pub fn check_shapes(&self) -> Result<()> {
        let n = self.sizes.len();
        if n < 2 || self.weights.len() != n - 1 || self.biases.len() != n - 1 {
            return Err(Error::Shape("dense layer count mismatch".into()));
        }
        for i in 0..n - 1 {
            if self.weights[i].len() != self.sizes[i] * self.sizes[i + 1] || self.biases[i].len() != self.sizes[i + 1] {
                return Err(Error::Shape(format!("dense layer {} shape mismatch", i + 1)));
            }
        }
        Ok(())
    }

    fn forward_all(&self, x: &[f64], batch: usize) -> Result<Vec<Vec<f64>>> {
        if x.len() != batch * self.inputs() {
            return Err(Error::Shape(format!(
                "expected {batch}×{} inputs, got {}",
                self.inputs(),
                x.len()
            )));
        }
        let last = self.weights.len() - 1;
        let mut acts = vec![x.to_vec()];
        for (i, w) in self.weights.iter().enumerate() {
            let (nin, nout) = (self.sizes[i], self.sizes[i + 1]);
            let mut z = vec![0.0; batch * nout];
            for row in z.chunks_exact_mut(nout) {
                row.copy_from_slice(&self.biases[i]);
            }
            gemm(batch, nin, nout, &acts[i], false, w, true, 1.0, &mut z);
            if i != last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        Ok(acts)
    }

    /// Outputs for `batch` row-major input vectors.
    pub fn forward(&self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        Ok(self.forward_all(x, batch)?.pop().expect("output"))
    }

    /// Mean over samples of (1/C)·‖pred − target‖² plus (λ/2)·Σ‖W‖², with
    /// its exact gradient.
    pub fn objective(&self, x: &[f64], y: &[f64], batch: usize, weight_decay: f64) -> Result<(f64, Gradients)> {
        if batch == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let c = self.outputs();
        if y.len() != batch * c {
            return Err(Error::Shape("target shape differs from network output".into()));
        }
        let acts = self.forward_all(x, batch)?;
        let out = acts.last().expect("output");
        let n = batch as f64;
        let mut total = out.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / (c as f64 * n);
        let scale = 2.0 / (c as f64 * n);
        let mut dz: Vec<f64> = out.iter().zip(y).map(|(p, t)| scale * (p - t)).collect();
        let mut grads = Gradients(
            self.weights
                .iter()
                .zip(&self.biases)
                .flat_map(|(w, b)| [vec![0.0; w.len()], vec![0.0; b.len()]])
                .collect(),
        );
        for i in (0..self.weights.len()).rev() {
            let (nin, nout) = (self.sizes[i], self.sizes[i + 1]);
            if i != self.weights.len() - 1 {
                for (d, &a) in dz.iter_mut().zip(&acts[i + 1]) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            gemm(nout, batch, nin, &dz, true, &acts[i], false, 0.0, &mut grads.0[2 * i]);
            for row in dz.chunks_exact(nout) {
                grads.0[2 * i + 1].iter_mut().zip(row).for_each(|(g, v)| *g += v);
            }
            if i > 0 {
                let mut da = vec![0.0; batch * nin];
                gemm(batch, nout, nin, &dz, false, &self.weights[i], false, 0.0, &mut da);
                dz = da;
            }
        }
        if weight_decay != 0.0 {
            for (i, w) in self.weights.iter().enumerate() {
                total += 0.5 * weight_decay * w.iter().map(|v| v * v).sum::<f64>();
                grads.0[2 * i].iter_mut().zip(w).for_each(|(g, v)| *g += weight_decay * v);
            }
        }
        Ok((total, grads))
    }
}
