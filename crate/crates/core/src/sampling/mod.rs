//! Importance weights, effective sample sizes, neural importance sampling
//! and the HMC reference sampler.
//!
//! Weights are handled as `log w̃ = −S(x) − log q_θ(x)` throughout; every
//! normalization goes through [`log_sum_exp`](crate::math::log_sum_exp).

mod hmc;

pub use hmc::{hamiltonian, hmc_sample, leapfrog, HmcConfig, HmcRun};

use alloc::vec::Vec;
use rand::Rng;

use crate::flow::Flow;
use crate::math::{self, log_sum_exp};
use crate::matrix::Matrix;
use crate::target::Target;
use crate::{Error, Result};

/// `log Ẑ = log((1/N) Σ w̃_i)`.
pub fn log_z_hat(log_w: &[f64]) -> Result<f64> {
    let lse = log_sum_exp(log_w);
    if !lse.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    Ok(lse - math::ln(log_w.len() as f64))
}

/// `Ẑ = (1/N) Σ w̃_i`.
pub fn z_hat(log_w: &[f64]) -> Result<f64> {
    Ok(math::exp(log_z_hat(log_w)?))
}

/// `(Σ w̃)² / (N Σ w̃²)` for samples drawn from the flow.
pub fn reverse_ess(log_w: &[f64]) -> Result<f64> {
    if log_w.len() < 2 {
        return Err(Error::usage("reverse ESS needs at least two samples"));
    }
    let l1 = log_sum_exp(log_w);
    let twice: Vec<f64> = log_w.iter().map(|l| 2.0 * l).collect();
    let l2 = log_sum_exp(&twice);
    if !l1.is_finite() || !l2.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    Ok(math::exp(2.0 * l1 - l2 - math::ln(log_w.len() as f64)))
}

/// `1 / ((1/M) Σ w̃_i / Ẑ)` for samples drawn from the target, with `log Ẑ`
/// estimated on an independent flow batch.
pub fn forward_ess(log_w_p: &[f64], log_z_hat_q: f64) -> Result<f64> {
    if log_w_p.len() < 2 {
        return Err(Error::usage("forward ESS needs at least two samples"));
    }
    if !log_z_hat_q.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let l = log_sum_exp(log_w_p);
    if l.is_nan() || l == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights);
    }
    Ok(math::exp(math::ln(log_w_p.len() as f64) + log_z_hat_q - l))
}

/// Self-normalized estimate of `E_p[Q]` from flow samples with weights
/// `log_w`; the standard error is `sqrt(Var_ŵ(Q) / (N · ESS))`.
pub fn weighted_mean(log_w: &[f64], values: &[f64]) -> Result<(f64, f64)> {
    if log_w.len() != values.len() || log_w.len() < 2 {
        return Err(Error::usage("need at least two weighted values"));
    }
    let lse = log_sum_exp(log_w);
    if !lse.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let w: Vec<f64> = log_w.iter().map(|&l| math::exp(l - lse)).collect();
    let total: f64 = w.iter().sum();
    // Centering on one value makes constant observables exact.
    let q0 = values[0];
    let mean = q0 + w.iter().zip(values).map(|(w, q)| w * (q - q0)).sum::<f64>() / total;
    let var: f64 = w.iter().zip(values).map(|(w, q)| w * (q - mean) * (q - mean)).sum();
    let ess = reverse_ess(log_w)?;
    let n_eff = ess * log_w.len() as f64;
    Ok((mean, math::sqrt(var / n_eff)))
}

/// Neural importance sampling: draws `n` flow samples and estimates
/// `E_p[Q]` with its standard error.
pub fn nis_estimate<F, T, Q, R>(flow: &F, target: &T, observable: Q, n: usize, rng: &mut R) -> Result<(f64, f64)>
where
    F: Flow,
    T: Target,
    Q: Fn(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    if n < 2 {
        return Err(Error::usage("NIS needs at least two samples"));
    }
    let (_, x, log_q) = flow.sample(n, rng)?;
    let s = target.action(&x)?;
    let log_w: Vec<f64> = s.iter().zip(&log_q).map(|(s, l)| -s - l).collect();
    let q: Vec<f64> = (0..n).map(|i| observable(x.row(i))).collect();
    weighted_mean(&log_w, &q)
}

/// `log w̃` of arbitrary configurations under a flow and target.
pub fn log_weights<F: Flow, T: Target>(flow: &F, target: &T, x: &Matrix) -> Result<Vec<f64>> {
    let s = target.action(x)?;
    let lq = flow.log_prob(x)?;
    Ok(s.iter().zip(&lq).map(|(s, l)| -s - l).collect())
}

/// Percentile bootstrap interval (16th and 84th percentiles) of
/// `stat(resample)`.
pub fn bootstrap_interval<R, S>(values: &[f64], resamples: usize, rng: &mut R, stat: S) -> Result<(f64, f64)>
where
    R: Rng + ?Sized,
    S: Fn(&[f64]) -> Result<f64>,
{
    let n = values.len();
    if n == 0 || resamples == 0 {
        return Err(Error::usage("bootstrap needs data and at least one resample"));
    }
    let mut buf = Vec::with_capacity(n);
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        buf.clear();
        buf.extend((0..n).map(|_| values[rng.random_range(0..n)]));
        let s = stat(&buf)?;
        if s.is_finite() {
            stats.push(s);
        }
    }
    if stats.is_empty() {
        return Err(Error::DegenerateWeights);
    }
    stats.sort_by(f64::total_cmp);
    let pick = |q: f64| stats[(math::round(q * (stats.len() - 1) as f64) as usize).min(stats.len() - 1)];
    Ok((pick(0.16), pick(0.84)))
}

/// Standard error of the mean of a correlated series by non-overlapping
/// batch means.
pub fn batch_means_se(values: &[f64], n_batches: usize) -> f64 {
    let n_batches = n_batches.clamp(2, values.len().max(2));
    let len = values.len() / n_batches;
    if len == 0 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..n_batches).map(|b| math::mean(&values[b * len..(b + 1) * len])).collect();
    math::sqrt(math::variance(&means) / n_batches as f64)
}
