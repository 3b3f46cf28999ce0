//! Size-preserving 2-D convolution stack with cached activations and exact
//! backpropagation. Images are `channels × h × w`, row-major, x fastest.

use rayon::prelude::*;

use super::arch::{Activation, NetworkParams};
use super::Gradients;
use crate::error::{Error, Result};

/// `c = alpha·op(a)·op(b) + beta·c` with row-major operands; `op` transposes
/// when the flag is set. `op(a)` is m×k, `op(b)` is k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the m×k, k×n and m×n row-major
    // buffers whose lengths are checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold `input` (c×h×w) into a (c·k·k)×(h·w) matrix for a stride-1
/// correlation with zero padding `pad`.
pub(crate) fn im2col(input: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [f64]) {
    let hw = h * w;
    debug_assert_eq!(cols.len(), c * k * k * hw);
    for ch in 0..c {
        let plane = &input[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - pad as isize;
                        *d = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `out` (c×h×w).
pub(crate) fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, out: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, &v) in row[y * w..(y + 1) * w].iter().enumerate() {
                        let sx = x as isize + kx as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Activations of one forward pass. `acts[l]` is H_l; `acts[0]` the input.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub h: usize,
    pub w: usize,
    pub acts: Vec<Vec<f64>>,
    /// im2col of each layer's effective input (H_{l−1}, plus H_s at skips).
    cols: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("at least the input")
    }
}

fn check_input(params: &NetworkParams, input: &[f64], h: usize, w: usize) -> Result<()> {
    let arch = &params.arch;
    let kmax = arch.layers.iter().map(|l| l.kernel).max().unwrap_or(1);
    if h < kmax || w < kmax {
        return Err(Error::Shape(format!("input {h}×{w} smaller than kernel {kmax}")));
    }
    if input.len() != arch.in_channels * h * w {
        return Err(Error::Shape(format!(
            "input has {} values, expected {}×{h}×{w}",
            input.len(),
            arch.in_channels
        )));
    }
    Ok(())
}

pub fn forward_cached(params: &NetworkParams, input: &[f64], h: usize, w: usize) -> Result<ForwardCache> {
    check_input(params, input, h, w)?;
    let arch = &params.arch;
    let hw = h * w;
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(arch.depth() + 1);
    let mut cols = Vec::with_capacity(arch.depth());
    acts.push(input.to_vec());
    for (i, layer) in arch.layers.iter().enumerate() {
        let cin = arch.channels_of(i);
        let summed;
        let x: &[f64] = match layer.skip_from {
            Some(s) => {
                summed = acts[i].iter().zip(&acts[s]).map(|(a, b)| a + b).collect::<Vec<_>>();
                &summed
            }
            None => &acts[i],
        };
        let kk = cin * layer.kernel * layer.kernel;
        let mut col = vec![0.0; kk * hw];
        im2col(x, cin, h, w, layer.kernel, layer.padding, &mut col);
        let mut z = vec![0.0; layer.filters * hw];
        for (f, row) in z.chunks_exact_mut(hw).enumerate() {
            row.fill(params.biases[i][f]);
        }
        gemm(layer.filters, kk, hw, &params.weights[i], false, &col, false, 1.0, &mut z);
        if layer.activation == Activation::Relu {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        cols.push(col);
        acts.push(z);
    }
    Ok(ForwardCache { h, w, acts, cols })
}

pub fn forward(params: &NetworkParams, input: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    let mut cache = forward_cached(params, input, h, w)?;
    Ok(cache.acts.pop().expect("output"))
}

/// Gradients of a scalar objective w.r.t. all weights and biases, given
/// `d_out` = ∂objective/∂output. No weight decay here.
pub fn backward(params: &NetworkParams, cache: &ForwardCache, d_out: &[f64]) -> Result<Gradients> {
    let arch = &params.arch;
    let (h, w) = (cache.h, cache.w);
    let hw = h * w;
    if d_out.len() != arch.out_channels * hw {
        return Err(Error::Shape("output gradient shape differs from network output".into()));
    }
    let depth = arch.depth();
    let mut d_acts: Vec<Vec<f64>> = (0..=depth).map(|l| vec![0.0; arch.channels_of(l) * hw]).collect();
    d_acts[depth].copy_from_slice(d_out);
    let mut grads = Gradients::zeros_like(params);
    for i in (0..depth).rev() {
        let layer = &arch.layers[i];
        let cin = arch.channels_of(i);
        let kk = cin * layer.kernel * layer.kernel;
        let mut dz = std::mem::take(&mut d_acts[i + 1]);
        if layer.activation == Activation::Relu {
            for (d, &a) in dz.iter_mut().zip(&cache.acts[i + 1]) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        {
            let gw = &mut grads.0[2 * i];
            gemm(layer.filters, hw, kk, &dz, false, &cache.cols[i], true, 0.0, gw);
        }
        for (f, row) in dz.chunks_exact(hw).enumerate() {
            grads.0[2 * i + 1][f] = row.iter().sum();
        }
        if i == 0 {
            continue;
        }
        let mut dcol = vec![0.0; kk * hw];
        gemm(kk, layer.filters, hw, &params.weights[i], true, &dz, false, 0.0, &mut dcol);
        let mut dx = vec![0.0; cin * hw];
        col2im(&dcol, cin, h, w, layer.kernel, layer.padding, &mut dx);
        if let Some(s) = layer.skip_from {
            d_acts[s].iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
        }
        d_acts[i].iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
    }
    Ok(grads)
}

/// Per-sample loss: (1/C)·‖pred − target‖² summed over pixels.
pub fn sample_loss(pred: &[f64], target: &[f64], channels: usize) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / channels as f64
}

/// Batch loss: mean over samples of [`sample_loss`].
pub fn loss(preds: &[Vec<f64>], targets: &[Vec<f64>], channels: usize) -> Result<f64> {
    if preds.len() != targets.len() || preds.iter().zip(targets).any(|(p, t)| p.len() != t.len()) {
        return Err(Error::Shape("prediction and target shapes differ".into()));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let n = preds.len() as f64;
    Ok(preds.iter().zip(targets).map(|(p, t)| sample_loss(p, t, channels)).sum::<f64>() / n)
}

/// One training example: `channels × h × w` input and target.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub input: &'a [f64],
    pub target: &'a [f64],
    pub h: usize,
    pub w: usize,
}

/// Objective = mean sample loss + (λ/2)·Σ‖W‖² (biases not decayed), and its
/// exact gradient. Per-sample work may run in parallel; the reduction is in
/// sample order, so results do not depend on the thread count.
pub fn batch_objective(params: &NetworkParams, batch: &[Sample<'_>], weight_decay: f64) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let c = params.arch.out_channels;
    let n = batch.len() as f64;
    let per: Vec<Result<(f64, Gradients)>> = batch
        .par_iter()
        .map(|s| {
            if s.target.len() != c * s.h * s.w {
                return Err(Error::Shape("target shape differs from network output".into()));
            }
            let cache = forward_cached(params, s.input, s.h, s.w)?;
            let out = cache.output();
            let l = sample_loss(out, s.target, c) / n;
            let scale = 2.0 / (c as f64 * n);
            let d: Vec<f64> = out.iter().zip(s.target).map(|(p, t)| scale * (p - t)).collect();
            Ok((l, backward(params, &cache, &d)?))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Gradients::zeros_like(params);
    for r in per {
        let (l, g) = r?;
        total += l;
        grads.add_assign(&g);
    }
    if weight_decay != 0.0 {
        for (i, w) in params.weights.iter().enumerate() {
            total += 0.5 * weight_decay * w.iter().map(|v| v * v).sum::<f64>();
            grads.0[2 * i].iter_mut().zip(w).for_each(|(g, v)| *g += weight_decay * v);
        }
    }
    Ok((total, grads))
}

/// Mean sample loss without gradients.
pub fn batch_loss(params: &NetworkParams, batch: &[Sample<'_>]) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let c = params.arch.out_channels;
    let per: Vec<Result<f64>> = batch
        .par_iter()
        .map(|s| Ok(sample_loss(&forward(params, s.input, s.h, s.w)?, s.target, c)))
        .collect();
    let mut total = 0.0;
    for r in per {
        total += r?;
    }
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::arch::{ArchitectureSpec, NetworkParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Direct-loop correlation oracle.
    fn naive_conv(input: &[f64], c: usize, h: usize, w: usize, wts: &[f64], bias: &[f64], k: usize) -> Vec<f64> {
        let f = bias.len();
        let p = (k / 2) as isize;
        let mut out = vec![0.0; f * h * w];
        for o in 0..f {
            for y in 0..h {
                for x in 0..w {
                    let mut s = bias[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - p;
                                let sx = x as isize + kx as isize - p;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    s += wts[((o * c + ci) * k + ky) * k + kx]
                                        * input[(ci * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                    }
                    out[(o * h + y) * w + x] = s;
                }
            }
        }
        out
    }

    #[test]
    fn single_layer_matches_direct_loops() {
        let arch = ArchitectureSpec::plain(3, 2, 2, 1).unwrap();
        let mut p = NetworkParams::init(&arch, 1);
        p.biases[0] = vec![0.3, -0.2];
        let x = random(3 * 7 * 9, 2);
        let got = forward(&p, &x, 7, 9).unwrap();
        let want = naive_conv(&x, 3, 7, 9, &p.weights[0], &p.biases[0], 3);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_params_give_zero_output() {
        let arch = ArchitectureSpec::encoder_decoder(4, 3, 8, 10).unwrap();
        let p = NetworkParams::zeros(&arch);
        let out = forward(&p, &random(4 * 21 * 21, 3), 21, 21).unwrap();
        assert_eq!(out.len(), 3 * 21 * 21);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_passes_channel_through() {
        let arch = ArchitectureSpec::plain(2, 1, 1, 1).unwrap();
        let mut p = NetworkParams::zeros(&arch);
        // centre tap of input channel 1
        p.weights[0][9 + 4] = 1.0;
        let x = random(2 * 5 * 6, 4);
        let out = forward(&p, &x, 5, 6).unwrap();
        assert_eq!(out, x[30..].to_vec());
    }

    #[test]
    fn spatial_size_preserved() {
        let arch = ArchitectureSpec::encoder_decoder(7, 3, 4, 10).unwrap();
        let p = NetworkParams::init(&arch, 5);
        for (h, w) in [(3, 3), (21, 21), (8, 30)] {
            let c = forward_cached(&p, &random(7 * h * w, 6), h, w).unwrap();
            for (l, a) in c.acts.iter().enumerate() {
                assert_eq!(a.len(), arch.channels_of(l) * h * w);
            }
        }
        assert!(forward(&p, &random(7 * 4, 6), 2, 2).is_err());
        assert!(forward(&p, &random(6 * 9, 6), 3, 3).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w, k) = (2, 5, 4, 3);
        let x = random(c * h * w, 7);
        let y = random(c * k * k * h * w, 8);
        let mut ax = vec![0.0; y.len()];
        im2col(&x, c, h, w, k, 1, &mut ax);
        let mut aty = vec![0.0; x.len()];
        col2im(&y, c, h, w, k, 1, &mut aty);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn loss_examples() {
        let t = vec![random(50, 9)];
        assert_eq!(loss(&t, &t, 1).unwrap(), 0.0);
        // residual 1 on m = 50 elements, n = 3 samples → 50
        let preds: Vec<Vec<f64>> = (0..3).map(|_| t[0].iter().map(|v| v + 1.0).collect()).collect();
        let targets = vec![t[0].clone(); 3];
        assert!((loss(&preds, &targets, 1).unwrap() - 50.0).abs() < 1e-12);
        let preds2: Vec<Vec<f64>> = (0..3).map(|_| t[0].iter().map(|v| v + 2.0).collect()).collect();
        assert!((loss(&preds2, &targets, 1).unwrap() - 200.0).abs() < 1e-12);
        assert!(loss(&preds[..1], &targets, 1).is_err());
    }

    #[test]
    fn zero_residual_gives_zero_gradients() {
        let arch = ArchitectureSpec::plain(2, 1, 4, 3).unwrap();
        let p = NetworkParams::init(&arch, 10);
        let x = random(2 * 6 * 6, 11);
        let t = forward(&p, &x, 6, 6).unwrap();
        let (l, g) = batch_objective(&p, &[Sample { input: &x, target: &t, h: 6, w: 6 }], 0.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.0.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn dead_relu_units_have_zero_gradient() {
        let arch = ArchitectureSpec::plain(1, 1, 2, 2).unwrap();
        let mut p = NetworkParams::init(&arch, 12);
        // filter 0 of layer 1 always negative → dead
        p.weights[0][..9].fill(0.0);
        p.biases[0][0] = -1.0;
        let x = random(36, 13);
        let t = random(36, 14);
        let (_, g) = batch_objective(&p, &[Sample { input: &x, target: &t, h: 6, w: 6 }], 0.0).unwrap();
        assert!(g.0[0][..9].iter().all(|&v| v == 0.0));
        assert_eq!(g.0[1][0], 0.0);
        assert!(g.0[0][9..].iter().any(|&v| v != 0.0));
    }
}
