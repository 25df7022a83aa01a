//! Overrelaxed Hamiltonian Monte Carlo with unit mass.
//!
//! Each chain alternates leapfrog proposals with a Metropolis test on the
//! Hamiltonian; every `overrelax_freq`-th step instead proposes the mirror
//! image `x → −x`, which for an even action is accepted with probability
//! one. The mirror move is still put through the Metropolis test and its
//! rejections are counted, so a non-even action shows up in the report
//! rather than biasing the chain.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::math;
use crate::matrix::Matrix;
use crate::parallel;
use crate::target::Target;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct HmcConfig {
    pub n_chains: usize,
    /// Stored steps per chain after burn-in.
    pub n_steps: usize,
    pub n_leapfrog: usize,
    /// Initial step size; tuned during burn-in when `tune` is set.
    pub step_size: f64,
    /// Every this-many steps is a mirror move; 0 disables overrelaxation.
    pub overrelax_freq: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub tune: bool,
    pub target_accept: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            n_chains: 10,
            n_steps: 100_000,
            n_leapfrog: 50,
            step_size: 0.05,
            overrelax_freq: 10,
            burn_in: 10_000,
            seed: 0,
            tune: true,
            target_accept: 0.7,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 || self.n_steps == 0 || self.n_leapfrog == 0 {
            return Err(Error::usage("HMC counts must be at least one"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::usage("HMC step size must be positive"));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::usage("HMC target acceptance must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Output of [`hmc_sample`]: chains are concatenated in chain order.
#[derive(Debug, Clone)]
pub struct HmcRun {
    pub samples: Matrix,
    /// Accepted fraction of leapfrog proposals after burn-in.
    pub acceptance: f64,
    /// Final step size of each chain.
    pub step_sizes: Vec<f64>,
    pub mirror_moves: usize,
    pub mirror_rejections: usize,
    /// Chains restarted from a fresh draw after a non-finite Hamiltonian.
    /// A restart during sampling is followed by a short unrecorded
    /// re-equilibration.
    pub restarts: usize,
}

/// Unrecorded steps after a restart during sampling.
const RESTART_EQUILIBRATION: usize = 200;

/// `S(x) + |p|²/2`.
pub fn hamiltonian(action: f64, p: &[f64]) -> f64 {
    action + 0.5 * p.iter().map(|v| v * v).sum::<f64>()
}

fn grad_row<T: Target>(target: &T, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (s, g) = target.action_and_grad(&Matrix::row_vector(x))?;
    Ok((s[0], g.into_vec()))
}

/// `n` leapfrog steps of size `eps` from `(x, p)`; returns the end point
/// and its action.
pub fn leapfrog<T: Target>(target: &T, x: &[f64], p: &[f64], eps: f64, n: usize) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let (_, g) = grad_row(target, x)?;
    leapfrog_from(target, x, p, &g, eps, n).map(|(x, p, s, _)| (x, p, s))
}

#[allow(clippy::type_complexity)]
fn leapfrog_from<T: Target>(
    target: &T,
    x: &[f64],
    p: &[f64],
    g0: &[f64],
    eps: f64,
    n: usize,
) -> Result<(Vec<f64>, Vec<f64>, f64, Vec<f64>)> {
    let mut x = x.to_vec();
    let mut p: Vec<f64> = p.iter().zip(g0).map(|(p, g)| p - 0.5 * eps * g).collect();
    let mut s = 0.0;
    let mut g = Vec::new();
    for k in 0..n {
        x.iter_mut().zip(&p).for_each(|(x, p)| *x += eps * p);
        (s, g) = grad_row(target, &x)?;
        let h = if k + 1 == n { 0.5 * eps } else { eps };
        p.iter_mut().zip(&g).for_each(|(p, g)| *p -= h * g);
    }
    Ok((x, p, s, g))
}

struct Chain {
    samples: Vec<f64>,
    accepted: usize,
    proposals: usize,
    mirror_moves: usize,
    mirror_rejections: usize,
    restarts: usize,
    step_size: f64,
}

fn fresh_state<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn run_chain<T: Target>(target: &T, cfg: &HmcConfig, chain: usize) -> Result<Chain> {
    let dim = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64 + 1);
    let mut x = fresh_state(dim, &mut rng);
    let (mut s, mut g) = grad_row(target, &x)?;
    let mut log_eps = math::ln(cfg.step_size);
    let (mut log_eps_sum, mut log_eps_count) = (0.0, 0usize);
    let mut out = Chain {
        samples: Vec::with_capacity(cfg.n_steps * dim),
        accepted: 0,
        proposals: 0,
        mirror_moves: 0,
        mirror_rejections: 0,
        restarts: 0,
        step_size: cfg.step_size,
    };
    let mut p = vec![0.0; dim];
    let mut cooldown = 0usize;
    let mut step = 0usize;
    while out.samples.len() < cfg.n_steps * dim {
        step += 1;
        let tuning = step <= cfg.burn_in;
        let sampling = !tuning && cooldown == 0;
        if step == cfg.burn_in + 1 && log_eps_count > 0 {
            log_eps = log_eps_sum / log_eps_count as f64;
        }
        if cfg.overrelax_freq > 0 && step.is_multiple_of(cfg.overrelax_freq) {
            let y: Vec<f64> = x.iter().map(|v| -v).collect();
            let (sy, gy) = grad_row(target, &y)?;
            let u: f64 = rng.random();
            out.mirror_moves += 1;
            if u < math::exp(s - sy) {
                (x, s, g) = (y, sy, gy);
            } else {
                out.mirror_rejections += 1;
            }
        } else {
            p.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let jitter = 0.8 + 0.4 * rng.random::<f64>();
            let eps = math::exp(log_eps) * jitter;
            let h0 = hamiltonian(s, &p);
            let u: f64 = rng.random();
            let prob = match leapfrog_from(target, &x, &p, &g, eps, cfg.n_leapfrog) {
                Ok((xn, pn, sn, gn)) => {
                    let h1 = hamiltonian(sn, &pn);
                    if h1.is_finite() {
                        let prob = math::exp(h0 - h1).min(1.0);
                        if u < prob {
                            (x, s, g) = (xn, sn, gn);
                            if sampling {
                                out.accepted += 1;
                            }
                        }
                        Some(prob)
                    } else {
                        None
                    }
                }
                Err(Error::Numeric(_)) => None,
                Err(e) => return Err(e),
            };
            let prob = match prob {
                Some(prob) => prob,
                None => {
                    if out.restarts < 3 {
                        log::warn!("HMC chain {chain}: non-finite Hamiltonian at step {step}, restarting");
                    } else {
                        log::debug!("HMC chain {chain}: non-finite Hamiltonian at step {step}, restarting");
                    }
                    out.restarts += 1;
                    if out.restarts > cfg.burn_in + cfg.n_steps {
                        return Err(Error::Numeric("HMC chain keeps diverging"));
                    }
                    if !tuning {
                        cooldown = RESTART_EQUILIBRATION.min(cfg.burn_in.max(1));
                    }
                    x = fresh_state(dim, &mut rng);
                    (s, g) = grad_row(target, &x)?;
                    0.0
                }
            };
            if sampling {
                out.proposals += 1;
            } else if tuning && cfg.tune {
                let rate = 1.0 / math::sqrt(step as f64 + 10.0);
                log_eps += 2.0 * rate * (prob - cfg.target_accept);
                if 2 * step > cfg.burn_in {
                    log_eps_sum += log_eps;
                    log_eps_count += 1;
                }
            }
        }
        if cooldown > 0 {
            cooldown -= 1;
        } else if !tuning {
            out.samples.extend_from_slice(&x);
        }
    }
    out.step_size = math::exp(log_eps);
    Ok(out)
}

/// Runs `cfg.n_chains` independent chains on up to `workers` threads.
/// Chain `c` draws from stream `c + 1` of a ChaCha8 generator seeded with
/// `cfg.seed`, so results do not depend on the worker count.
pub fn hmc_sample<T: Target>(target: &T, cfg: &HmcConfig, workers: usize) -> Result<HmcRun> {
    cfg.validate()?;
    let chains = parallel::map_indexed(cfg.n_chains, workers, |c| run_chain(target, cfg, c));
    let dim = target.dim();
    let mut data = Vec::with_capacity(cfg.n_chains * cfg.n_steps * dim);
    let (mut accepted, mut proposals) = (0, 0);
    let mut run = HmcRun {
        samples: Matrix::zeros(0, dim),
        acceptance: 0.0,
        step_sizes: Vec::with_capacity(cfg.n_chains),
        mirror_moves: 0,
        mirror_rejections: 0,
        restarts: 0,
    };
    for chain in chains {
        let chain = chain?;
        data.extend_from_slice(&chain.samples);
        accepted += chain.accepted;
        proposals += chain.proposals;
        run.mirror_moves += chain.mirror_moves;
        run.mirror_rejections += chain.mirror_rejections;
        run.restarts += chain.restarts;
        run.step_sizes.push(chain.step_size);
    }
    run.acceptance = if proposals == 0 { 0.0 } else { accepted as f64 / proposals as f64 };
    run.samples = Matrix::from_vec(data.len() / dim, dim, data);
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::target::{DoubleWell, GaussianTarget};

    #[test]
    fn tiny_step_is_always_accepted() {
        let dw = DoubleWell::new(4);
        let x = [0.3, -0.2, 1.0, 0.8];
        let p = [1.0, -0.5, 0.2, 2.0];
        let (xn, pn, sn) = leapfrog(&dw, &x, &p, 1e-12, 3).unwrap();
        let s0 = dw.action(&Matrix::row_vector(&x)).unwrap()[0];
        assert!((hamiltonian(sn, &pn) - hamiltonian(s0, &p)).abs() < 1e-9);
        for (a, b) in xn.iter().zip(&x) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn leapfrog_is_reversible() {
        let dw = DoubleWell::new(8);
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let p: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).cos()).collect();
        let (x1, p1, _) = leapfrog(&dw, &x, &p, 0.05, 50).unwrap();
        let back: Vec<f64> = p1.iter().map(|v| -v).collect();
        let (x2, p2, _) = leapfrog(&dw, &x1, &back, 0.05, 50).unwrap();
        for i in 0..8 {
            assert!((x2[i] - x[i]).abs() < 1e-8);
            assert!((p2[i] + p[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn chains_are_worker_independent() {
        let g = GaussianTarget::new(&[0.0, 0.0], &[1.0, 2.0]).unwrap();
        let cfg = HmcConfig { n_chains: 3, n_steps: 50, n_leapfrog: 5, burn_in: 20, step_size: 0.3, ..Default::default() };
        let a = hmc_sample(&g, &cfg, 1).unwrap();
        let b = hmc_sample(&g, &cfg, 3).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.samples.shape(), (150, 2));
        assert_eq!(a.mirror_rejections, 0);
    }

    #[test]
    fn persistent_divergence_is_an_error() {
        let g = GaussianTarget::new(&[0.0], &[1.0]).unwrap();
        let cfg = HmcConfig { n_chains: 1, n_steps: 30, n_leapfrog: 200, burn_in: 5, step_size: 50.0, tune: false, ..Default::default() };
        assert!(matches!(hmc_sample(&g, &cfg, 1), Err(Error::Numeric(_))));
    }
}
