//! Experiments on the estimators themselves: replicate variance and bias,
//! the singular-weight regime of early training, and the zero mean of the
//! score term.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::estimators::{estimate, per_sample_terms, EstimatorId, GradientEstimate};
use crate::flow::{AffineFlow, Flow};
use crate::math;
use crate::matrix::Matrix;
use crate::parallel;
use crate::sampling;
use crate::target::{DoubleWell, GaussianTarget, Target};
use crate::{Error, Result};

/// Generator for replicate `k` of an experiment seeded with `seed`.
pub fn replicate_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64 + 1);
    rng
}

/// Componentwise statistics of an estimator over independent batches.
#[derive(Debug, Clone)]
pub struct VarianceReport {
    pub estimator: EstimatorId,
    pub batch_size: usize,
    /// Successful replicates.
    pub replicates: usize,
    pub mean: Vec<f64>,
    /// Unbiased variance across replicates.
    pub variance: Vec<f64>,
    pub norm_mean: f64,
    pub norm_variance: f64,
    /// Replicate index and error of every failed replicate.
    pub failures: Vec<(usize, Error)>,
}

impl VarianceReport {
    /// Standard error of the replicate mean, per component.
    pub fn stderr(&self) -> Vec<f64> {
        self.variance.iter().map(|v| math::sqrt(v / self.replicates as f64)).collect()
    }
}

fn summarize(estimator: EstimatorId, batch_size: usize, grads: &[Vec<f64>], failures: Vec<(usize, Error)>) -> Result<VarianceReport> {
    let r = grads.len();
    if r < 2 {
        return Err(Error::usage("fewer than two successful replicates"));
    }
    let p = grads[0].len();
    let mut mean = vec![0.0; p];
    for g in grads {
        mean.iter_mut().zip(g).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= r as f64);
    let mut variance = vec![0.0; p];
    for g in grads {
        for j in 0..p {
            let d = g[j] - mean[j];
            variance[j] += d * d;
        }
    }
    variance.iter_mut().for_each(|v| *v /= (r - 1) as f64);
    let norms: Vec<f64> = grads.iter().map(|g| math::norm(g)).collect();
    Ok(VarianceReport {
        estimator,
        batch_size,
        replicates: r,
        mean,
        variance,
        norm_mean: math::mean(&norms),
        norm_variance: math::variance(&norms),
        failures,
    })
}

/// Evaluates `id` on `r` independent batches of size `n`. Replicate `k`
/// draws its batch from [`replicate_rng`]`(seed, k)`, so two estimators
/// measured with the same seed see identical batches.
#[allow(clippy::too_many_arguments)]
pub fn measure_variance<F: Flow, T: Target>(
    id: EstimatorId,
    flow: &F,
    target: &T,
    n: usize,
    r: usize,
    seed: u64,
    workers: usize,
) -> Result<VarianceReport> {
    if r < 30 {
        return Err(Error::usage("variance needs at least 30 replicates"));
    }
    let results = parallel::map_indexed(r, workers, |k| {
        let z = flow.base().sample(n, &mut replicate_rng(seed, k));
        estimate(id, flow, target, &z, 1).map(|e| e.grad)
    });
    let mut grads = Vec::with_capacity(r);
    let mut failures = Vec::new();
    for (k, res) in results.into_iter().enumerate() {
        match res {
            Ok(g) => grads.push(g),
            Err(e) => failures.push((k, e)),
        }
    }
    summarize(id, n, &grads, failures)
}

/// Layout of the singular-weight batch: one sample at `anchor` and `n − 1`
/// samples spread by `tail_spread` around `tail_center`, where the target
/// is small and flat.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularRegimeSpec {
    pub n: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub anchor: Vec<f64>,
    pub tail_center: Vec<f64>,
    pub tail_spread: f64,
}

impl SingularRegimeSpec {
    /// Anchor inside the positive well at 0.7·x* (slightly jittered, so the
    /// action gradient there is of order one); tail at the barrier top
    /// `x = 0`.
    pub fn double_well(dw: &DoubleWell, n: usize, epsilon: f64, seed: u64) -> Self {
        let mut rng = replicate_rng(seed, 0);
        let x_star = dw.minimum();
        let anchor = (0..dw.sites).map(|_| x_star * (0.7 + 0.05 * rng.sample::<f64, _>(StandardNormal))).collect();
        Self { n, epsilon, seed, anchor, tail_center: vec![0.0; dw.sites], tail_spread: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct SingularProbe {
    pub norm_pathpq: f64,
    pub norm_zpathpq: f64,
    pub norm_pathqp: f64,
    /// Cosine between PathPQ and the anchor's own path gradient.
    pub cos_pathpq_anchor: f64,
    pub cos_pathpq_pathqp: f64,
    /// `max_{i<N} w̃_i / w̃_N` of the constructed batch.
    pub weight_ratio: f64,
    pub pathpq: GradientEstimate,
    pub zpathpq: GradientEstimate,
    pub pathqp: GradientEstimate,
}

/// Builds the singular-weight batch and compares the three path
/// estimators on it. The anchor is the last row.
pub fn singular_regime_probe<F: Flow, T: Target>(spec: &SingularRegimeSpec, flow: &F, target: &T) -> Result<SingularProbe> {
    let d = flow.dim();
    if spec.n < 2 || spec.anchor.len() != d || spec.tail_center.len() != d {
        return Err(Error::usage("singular regime spec does not match the flow"));
    }
    if !(spec.epsilon > 0.0 && spec.epsilon <= 1e-6) {
        return Err(Error::usage("epsilon must lie in (0, 1e-6]"));
    }
    let mut rng = replicate_rng(spec.seed, 1);
    let mut x = Matrix::zeros(spec.n, d);
    for i in 0..spec.n - 1 {
        for (j, v) in x.row_mut(i).iter_mut().enumerate() {
            *v = spec.tail_center[j] + spec.tail_spread * rng.sample::<f64, _>(StandardNormal);
        }
    }
    x.row_mut(spec.n - 1).copy_from_slice(&spec.anchor);
    let (z, _) = flow.inverse(&x)?;
    let log_w = sampling::log_weights(flow, target, &x)?;
    let anchor_lw = log_w[spec.n - 1];
    let tail_max = log_w[..spec.n - 1].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weight_ratio = math::exp(tail_max - anchor_lw);
    if !(weight_ratio <= spec.epsilon) {
        return Err(Error::Construction { achieved: weight_ratio, required: spec.epsilon });
    }
    let pathpq = estimate(EstimatorId::PathPQ, flow, target, &z, 1)?;
    let zpathpq = estimate(EstimatorId::ZPathPQ, flow, target, &z, 1)?;
    let pathqp = estimate(EstimatorId::PathQP, flow, target, &z, 1)?;
    let anchor = per_sample_terms(EstimatorId::PathPQ, flow, target, &z.slice_rows(spec.n - 1, spec.n))?;
    Ok(SingularProbe {
        norm_pathpq: pathpq.grad_norm,
        norm_zpathpq: zpathpq.grad_norm,
        norm_pathqp: pathqp.grad_norm,
        cos_pathpq_anchor: math::cosine(&pathpq.grad, anchor.row(0)),
        cos_pathpq_pathqp: math::cosine(&pathpq.grad, &pathqp.grad),
        weight_ratio,
        pathpq,
        zpathpq,
        pathqp,
    })
}

/// Monte-Carlo mean of the score term with per-component standard errors.
#[derive(Debug, Clone)]
pub struct ScoreMean {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub samples: usize,
}

impl ScoreMean {
    /// Every component lies within `k` standard errors of zero.
    pub fn within(&self, k: f64) -> bool {
        self.mean.iter().zip(&self.stderr).all(|(m, s)| m.abs() <= k * s)
    }

    pub fn mean_norm(&self) -> f64 {
        math::norm(&self.mean)
    }
}

/// Averages the score estimator over `batches` batches of `batch` samples;
/// standard errors come from the spread of the batch means.
pub fn score_zero_mean_test<F: Flow, T: Target>(
    flow: &F,
    target: &T,
    batch: usize,
    batches: usize,
    seed: u64,
    workers: usize,
) -> Result<ScoreMean> {
    let rep = measure_variance(EstimatorId::Score, flow, target, batch, batches, seed, workers)?;
    if let Some((_, e)) = rep.failures.first() {
        return Err(e.clone());
    }
    Ok(ScoreMean { stderr: rep.stderr(), mean: rep.mean, samples: batch * rep.replicates })
}

/// A 1-D affine flow within `rel` (relative) of the Gaussian target
/// `N(mean, std²)`: `loc = mean + rel·std`, `scale = std·(1 + rel)`.
pub fn near_converged_pair(mean: f64, std: f64, rel: f64) -> Result<(AffineFlow, GaussianTarget)> {
    let flow = AffineFlow::new(&[mean + rel * std], &[std * (1.0 + rel)], 1.0)?;
    let target = GaussianTarget::new(&[mean], &[std])?;
    Ok((flow, target))
}

/// Exact gradient of `KL(p‖q)` for `p = N(mean, std²)` and
/// `q = N(loc, scale²)` per coordinate, in the `[loc…, scale…]` layout of
/// [`AffineFlow`](crate::flow::AffineFlow) with a unit base.
pub fn gaussian_forward_kl_grad(loc: &[f64], scale: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    let d = loc.len();
    let mut g = vec![0.0; 2 * d];
    for j in 0..d {
        let diff = mean[j] - loc[j];
        let c = scale[j];
        g[j] = -diff / (c * c);
        g[d + j] = 1.0 / c - (std[j] * std[j] + diff * diff) / (c * c * c);
    }
    g
}

/// Empirical bias `mean − exact` with standard errors, per component.
#[derive(Debug, Clone)]
pub struct BiasReport {
    pub batch_size: usize,
    pub bias: Vec<f64>,
    pub stderr: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn measure_bias<F: Flow, T: Target>(
    id: EstimatorId,
    flow: &F,
    target: &T,
    exact: &[f64],
    n: usize,
    r: usize,
    seed: u64,
    workers: usize,
) -> Result<BiasReport> {
    let rep = measure_variance(id, flow, target, n, r, seed, workers)?;
    if let Some((_, e)) = rep.failures.first() {
        return Err(e.clone());
    }
    let bias = rep.mean.iter().zip(exact).map(|(m, e)| m - e).collect();
    Ok(BiasReport { batch_size: n, bias, stderr: rep.stderr() })
}
