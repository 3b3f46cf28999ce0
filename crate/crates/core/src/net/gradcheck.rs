//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::arch::NetworkParams;
use super::conv::{batch_objective, forward, Sample};
use super::mlp::MlpParams;
use super::{Gradients, Parameters};
use crate::error::{Error, Result};

/// Fraction of parameters probed.
pub const CHECK_FRACTION: f64 = 0.01;
/// Lower bound on the number of probed parameters (small nets).
pub const MIN_CHECKED: usize = 24;
/// Gradients below this magnitude are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// |a − n| / max(|a|, |n|, REL_FLOOR).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Probe a seeded random subset of parameters of `params` with step `eps`,
/// comparing `(f(θ+ε) − f(θ−ε)) / 2ε` with `analytic`.
pub fn grad_check_with<P, F>(params: &P, analytic: &Gradients, eps: f64, seed: u64, objective: F) -> Result<GradCheckReport>
where
    P: Parameters + Clone,
    F: Fn(&P) -> Result<f64>,
{
    grad_check_with_diff(params, analytic, eps, seed, |a, b| Ok(objective(a)? - objective(b)?))
}

/// As [`grad_check_with`], but `diff(θ+, θ−)` returns f(θ+) − f(θ−)
/// directly, so callers can avoid cancellation when f is large.
pub fn grad_check_with_diff<P, D>(params: &P, analytic: &Gradients, eps: f64, seed: u64, diff: D) -> Result<GradCheckReport>
where
    P: Parameters + Clone,
    D: Fn(&P, &P) -> Result<f64>,
{
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {eps}")));
    }
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    if sizes.len() != analytic.0.len() || sizes.iter().zip(&analytic.0).any(|(&n, g)| n != g.len()) {
        return Err(Error::Shape("analytic gradient shape differs from parameters".into()));
    }
    let total: usize = sizes.iter().sum();
    let count = ((total as f64 * CHECK_FRACTION).ceil() as usize).max(MIN_CHECKED.min(total));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, total, count).into_vec();
    picks.sort_unstable();
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for flat in picks {
        let (mut t, mut j) = (0, flat);
        while j >= sizes[t] {
            j -= sizes[t];
            t += 1;
        }
        let orig = probe.tensors()[t][j];
        probe.tensors_mut()[t][j] = orig + eps;
        let mut down = probe.clone();
        down.tensors_mut()[t][j] = orig - eps;
        let numeric = diff(&probe, &down)? / (2.0 * eps);
        probe.tensors_mut()[t][j] = orig;
        worst = worst.max(relative_error(analytic.0[t][j], numeric));
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        checked: count,
    })
}

/// Gradient check of the convolutional objective (loss + weight decay).
pub fn grad_check(
    params: &NetworkParams,
    batch: &[Sample<'_>],
    eps: f64,
    weight_decay: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {eps}")));
    }
    let (_, analytic) = batch_objective(params, batch, weight_decay)?;
    let c = params.arch.out_channels as f64;
    let n = batch.len() as f64;
    // Σ(a−t)² − Σ(b−t)² = Σ(a−b)(a+b−2t), free of cancellation at large loss.
    grad_check_with_diff(params, &analytic, eps, seed, |up, down| {
        let mut d = 0.0;
        for s in batch {
            let a = forward(up, s.input, s.h, s.w)?;
            let b = forward(down, s.input, s.h, s.w)?;
            d += a.iter().zip(&b).zip(s.target).map(|((a, b), t)| (a - b) * (a + b - 2.0 * t)).sum::<f64>() / (c * n);
        }
        for (wa, wb) in up.weights.iter().zip(&down.weights) {
            d += 0.5 * weight_decay * wa.iter().zip(wb).map(|(a, b)| (a - b) * (a + b)).sum::<f64>();
        }
        Ok(d)
    })
}

/// Gradient check of the dense baseline objective.
pub fn mlp_grad_check(
    params: &MlpParams,
    x: &[f64],
    y: &[f64],
    batch: usize,
    eps: f64,
    weight_decay: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {eps}")));
    }
    let (_, analytic) = params.objective(x, y, batch, weight_decay)?;
    grad_check_with(params, &analytic, eps, seed, |p| Ok(p.objective(x, y, batch, weight_decay)?.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::arch::ArchitectureSpec;
    use rand::Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn linear_single_layer_is_exact() {
        let arch = ArchitectureSpec::plain(3, 2, 2, 1).unwrap();
        let p = NetworkParams::init(&arch, 1);
        let (x, t) = (random(3 * 8 * 8, 2), random(2 * 8 * 8, 3));
        let batch = [Sample { input: &x, target: &t, h: 8, w: 8 }];
        let r = grad_check(&p, &batch, 1e-5, 0.0, 4).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, MIN_CHECKED);
    }

    #[test]
    fn four_layer_eight_filter_net() {
        let mut arch = ArchitectureSpec::plain(4, 1, 8, 4).unwrap();
        arch.layers[2].skip_from = Some(1);
        arch.validate().unwrap();
        let mut p = NetworkParams::init(&arch, 5);
        for b in p.biases.iter_mut().flatten() {
            *b = 0.05;
        }
        let (x1, t1) = (random(4 * 10 * 10, 6), random(100, 7));
        let (x2, t2) = (random(4 * 10 * 10, 8), random(100, 9));
        let batch = [
            Sample { input: &x1, target: &t1, h: 10, w: 10 },
            Sample { input: &x2, target: &t2, h: 10, w: 10 },
        ];
        let r = grad_check(&p, &batch, 1e-5, 1e-4, 10).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn mlp_gradients() {
        let p = MlpParams::init(&[5, 12, 12, 12, 2], 11).unwrap();
        let (x, y) = (random(5 * 6, 12), random(2 * 6, 13));
        let r = mlp_grad_check(&p, &x, &y, 6, 1e-5, 1e-4, 14).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn zero_step_rejected() {
        let arch = ArchitectureSpec::plain(1, 1, 1, 1).unwrap();
        let p = NetworkParams::init(&arch, 1);
        let (x, t) = (random(9, 1), random(9, 2));
        let batch = [Sample { input: &x, target: &t, h: 3, w: 3 }];
        assert!(grad_check(&p, &batch, 0.0, 0.0, 1).is_err());
        assert!(grad_check(&p, &batch, f64::NAN, 0.0, 1).is_err());
    }
}
