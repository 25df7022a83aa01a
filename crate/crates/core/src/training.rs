//! Adam, a plateau learning-rate schedule and the training step.
//!
//! [`Trainer`] owns everything that changes between iterations (optimizer
//! moments, schedule, random streams) so a run can be checkpointed and
//! resumed bit-exactly. Wall-clock time, files and logging of rows are left
//! to the caller.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::estimators::{estimate, EstimatorId};
use crate::flow::Flow;
use crate::math;
use crate::sampling;
use crate::target::Target;
use crate::{Error, Result};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Applied steps.
    pub t: u64,
    /// Steps skipped because the gradient was not finite.
    pub skipped: u64,
}

impl Adam {
    pub fn new(n_params: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0, skipped: 0 }
    }

    /// Applies one update with learning rate `lr`. Returns `false` (and
    /// leaves everything but the skip counter untouched) when `grad` has a
    /// non-finite entry.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) -> bool {
        assert_eq!(theta.len(), grad.len());
        assert_eq!(self.m.len(), grad.len());
        if grad.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            log::warn!("skipping Adam step: non-finite gradient");
            return false;
        }
        self.t += 1;
        let t = self.t.min(i32::MAX as u64) as i32;
        let c1 = 1.0 - math::powi(self.beta1, t);
        let c2 = 1.0 - math::powi(self.beta2, t);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            theta[i] -= lr * mh / (math::sqrt(vh) + self.eps);
        }
        true
    }
}

/// Reduce-on-plateau schedule: after `patience` consecutive observations
/// without strict improvement, `lr ← max(lr · factor, lr_min)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub patience: u64,
    pub factor: f64,
    pub lr_min: f64,
    pub best: f64,
    pub counter: u64,
}

impl Plateau {
    pub fn new(patience: u64, factor: f64, lr_min: f64) -> Self {
        Self { patience, factor, lr_min, best: f64::INFINITY, counter: 0 }
    }

    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.counter = 0;
            return lr;
        }
        self.counter += 1;
        if self.counter >= self.patience {
            self.counter = 0;
            return (lr * self.factor).max(self.lr_min);
        }
        lr
    }
}

/// Train with `start` until iteration `at`, then with the main estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Switch {
    pub start: EstimatorId,
    pub at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub estimator: EstimatorId,
    pub batch_size: usize,
    pub max_iters: u64,
    pub lr0: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub plateau_patience: u64,
    pub lr_min: f64,
    pub lr_factor: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub eval_batch: usize,
    pub switch: Option<Switch>,
    /// Gradients longer than `clip_factor` times the running mean norm are
    /// rescaled to that length before the update; 0 disables clipping.
    pub clip_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorId::PathQP,
            batch_size: 512,
            max_iters: 5000,
            lr0: 5e-5,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            plateau_patience: 3000,
            lr_min: 1e-7,
            lr_factor: 0.5,
            seed: 0,
            eval_every: 100,
            eval_batch: 4096,
            switch: None,
            clip_factor: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::usage(m));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.lr0 > 0.0) || !(self.lr_min > 0.0) || self.lr_min > self.lr0 {
            return bad("learning rates must satisfy 0 < lr_min <= lr0");
        }
        let (b1, b2) = self.betas;
        if !(b1 > 0.0 && b1 < 1.0 && b2 > 0.0 && b2 < 1.0) {
            return bad("betas must lie in (0, 1)");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad("lr_factor must lie in (0, 1)");
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be positive");
        }
        if !(self.clip_factor == 0.0 || self.clip_factor > 1.0) {
            return bad("clip_factor must be 0 (off) or greater than 1");
        }
        if self.eval_every > 0 && self.eval_batch < 2 {
            return bad("eval_batch must be at least 2");
        }
        Ok(())
    }

    /// Estimator in use at iteration `iter` (0-based).
    pub fn estimator_at(&self, iter: u64) -> EstimatorId {
        match self.switch {
            Some(s) if iter < s.at => s.start,
            _ => self.estimator,
        }
    }
}

/// One logged iteration. `eval_reverse_ess` is set on evaluation
/// iterations only.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub loss_surrogate: f64,
    pub grad_norm: f64,
    pub reverse_ess: f64,
    pub eval_reverse_ess: Option<f64>,
    pub lr: f64,
    pub estimator: EstimatorId,
    /// The batch failed numerically and no update was applied.
    pub skipped: bool,
}

/// Random stream position, enough to rebuild a ChaCha8 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngPos {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

fn rng_at(pos: RngPos) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(pos.seed);
    rng.set_stream(pos.stream);
    rng.set_word_pos(pos.word_pos);
    rng
}

fn rng_pos(rng: &ChaCha8Rng, seed: u64) -> RngPos {
    RngPos { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos() }
}

/// Everything besides θ that a resumed run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub iter: u64,
    pub lr: f64,
    pub adam: Adam,
    pub plateau: Plateau,
    pub consecutive_failures: u32,
    /// Running mean of the (clipped) gradient norm; 0 before the first step.
    pub grad_norm_ema: f64,
    pub batch_rng: RngPos,
    pub eval_rng: RngPos,
}

/// Consecutive failed batches tolerated before a run is aborted.
pub const MAX_CONSECUTIVE_FAILURES: u32 = 10;

/// Decay of the running gradient-norm mean used for clipping.
pub const GRAD_NORM_DECAY: f64 = 0.99;

pub struct Trainer {
    pub cfg: TrainConfig,
    state: TrainState,
    batch_rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, n_params: usize) -> Result<Self> {
        cfg.validate()?;
        let batch_rng = rng_at(RngPos { seed: cfg.seed, stream: 1, word_pos: 0 });
        let eval_rng = rng_at(RngPos { seed: cfg.seed, stream: 2, word_pos: 0 });
        let state = TrainState {
            iter: 0,
            lr: cfg.lr0,
            adam: Adam::new(n_params, cfg.betas.0, cfg.betas.1, cfg.adam_eps),
            plateau: Plateau::new(cfg.plateau_patience, cfg.lr_factor, cfg.lr_min),
            consecutive_failures: 0,
            grad_norm_ema: 0.0,
            batch_rng: rng_pos(&batch_rng, cfg.seed),
            eval_rng: rng_pos(&eval_rng, cfg.seed),
        };
        Ok(Self { cfg, state, batch_rng, eval_rng })
    }

    pub fn resume(cfg: TrainConfig, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        let batch_rng = rng_at(state.batch_rng);
        let eval_rng = rng_at(state.eval_rng);
        Ok(Self { cfg, state, batch_rng, eval_rng })
    }

    pub fn state(&self) -> TrainState {
        let mut s = self.state.clone();
        s.batch_rng = rng_pos(&self.batch_rng, self.cfg.seed);
        s.eval_rng = rng_pos(&self.eval_rng, self.cfg.seed);
        s
    }

    pub fn iter(&self) -> u64 {
        self.state.iter
    }

    pub fn lr(&self) -> f64 {
        self.state.lr
    }

    pub fn done(&self) -> bool {
        self.state.iter >= self.cfg.max_iters
    }

    /// One iteration: draw a batch, estimate, update, schedule, and
    /// evaluate on a held-out batch every `eval_every` iterations.
    ///
    /// A batch that fails numerically is skipped; more than
    /// [`MAX_CONSECUTIVE_FAILURES`] in a row return the error.
    pub fn step<F: Flow, T: Target>(&mut self, flow: &mut F, target: &T, workers: usize) -> Result<MetricsRow> {
        let iter = self.state.iter;
        let id = self.cfg.estimator_at(iter);
        let z = flow.base().sample(self.cfg.batch_size, &mut self.batch_rng);
        let mut row = MetricsRow {
            iter,
            loss_surrogate: f64::NAN,
            grad_norm: f64::NAN,
            reverse_ess: f64::NAN,
            eval_reverse_ess: None,
            lr: self.state.lr,
            estimator: id,
            skipped: false,
        };
        match estimate(id, flow, target, &z, workers) {
            Ok(mut est) => {
                self.state.consecutive_failures = 0;
                row.loss_surrogate = est.loss;
                row.grad_norm = est.grad_norm;
                row.reverse_ess = sampling::reverse_ess(&est.log_weights).unwrap_or(f64::NAN);
                self.clip(&mut est.grad, est.grad_norm);
                row.skipped = !self.state.adam.step(flow.params_mut(), &est.grad, self.state.lr);
                let monitored = if id.is_forward() { -math::ln(row.reverse_ess) } else { est.loss };
                if monitored.is_finite() {
                    self.state.lr = self.state.plateau.observe(monitored, self.state.lr);
                }
            }
            Err(e @ (Error::Numeric(_) | Error::DegenerateWeights)) => {
                self.state.consecutive_failures += 1;
                log::warn!("iteration {iter}: {e}; batch skipped");
                if self.state.consecutive_failures > MAX_CONSECUTIVE_FAILURES {
                    return Err(e);
                }
                row.skipped = true;
            }
            Err(e) => return Err(e),
        }
        self.state.iter += 1;
        if self.cfg.eval_every > 0 && self.state.iter.is_multiple_of(self.cfg.eval_every) {
            row.eval_reverse_ess = Some(self.eval_reverse_ess(flow, target).unwrap_or(f64::NAN));
        }
        Ok(row)
    }

    fn clip(&mut self, grad: &mut [f64], norm: f64) {
        if !norm.is_finite() {
            return;
        }
        let ema = self.state.grad_norm_ema;
        let mut kept = norm;
        if self.cfg.clip_factor > 0.0 && ema > 0.0 && norm > self.cfg.clip_factor * ema {
            kept = self.cfg.clip_factor * ema;
            let scale = kept / norm;
            grad.iter_mut().for_each(|g| *g *= scale);
            log::debug!("iteration {}: gradient norm {norm:.3e} clipped to {kept:.3e}", self.state.iter);
        }
        self.state.grad_norm_ema = if ema > 0.0 { GRAD_NORM_DECAY * ema + (1.0 - GRAD_NORM_DECAY) * kept } else { kept };
    }

    fn eval_reverse_ess<F: Flow, T: Target>(&mut self, flow: &F, target: &T) -> Result<f64> {
        let (_, x, log_q) = flow.sample(self.cfg.eval_batch, &mut self.eval_rng)?;
        let s = target.action(&x)?;
        let log_w: Vec<f64> = s.iter().zip(&log_q).map(|(s, l)| -s - l).collect();
        sampling::reverse_ess(&log_w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_examples() {
        let mut adam = Adam::new(2, 0.9, 0.999, 1e-8);
        let mut theta = [1.0, -2.0];
        adam.step(&mut theta, &[0.0, 0.0], 0.1);
        assert_eq!(theta, [1.0, -2.0]);

        let mut adam = Adam::new(2, 0.9, 0.999, 1e-8);
        let mut theta = [0.0, 0.0];
        adam.step(&mut theta, &[3.0, -0.5], 0.01);
        assert!((theta[0] + 0.01).abs() < 1e-9);
        assert!((theta[1] - 0.01).abs() < 1e-9);

        let mut a = Adam::new(1, 0.9, 0.999, 1e-8);
        let mut b = a.clone();
        let (mut ta, mut tb) = ([0.5], [0.5]);
        for g in [0.3, -1.0, 2.0] {
            a.step(&mut ta, &[g], 0.1);
            b.step(&mut tb, &[g], 0.1);
        }
        assert_eq!(ta, tb);
        assert_eq!(a, b);

        assert!(!a.step(&mut ta, &[f64::NAN], 0.1));
        assert_eq!(a.skipped, 1);
        assert_eq!(a.t, 3);
    }

    #[test]
    fn plateau_examples() {
        let mut p = Plateau::new(3, 0.5, 1e-7);
        let mut lr = 1.0;
        for k in 0..10 {
            lr = p.observe(-(k as f64), lr);
        }
        assert_eq!(lr, 1.0);

        let mut p = Plateau::new(3, 0.5, 1e-7);
        let mut lr = 1.0;
        for _ in 0..4 {
            lr = p.observe(2.0, lr);
        }
        // first observation improves on +inf, then three flat ones
        assert_eq!(lr, 0.5);

        let mut p = Plateau::new(1, 0.5, 1e-7);
        let mut lr = 1e-6;
        for _ in 0..20 {
            lr = p.observe(1.0, lr);
        }
        assert_eq!(lr, 1e-7);
    }

    #[test]
    fn switch_rule() {
        let cfg = TrainConfig {
            estimator: EstimatorId::ZPathPQ,
            switch: Some(Switch { start: EstimatorId::PathPQ, at: 10 }),
            ..Default::default()
        };
        assert_eq!(cfg.estimator_at(9), EstimatorId::PathPQ);
        assert_eq!(cfg.estimator_at(10), EstimatorId::ZPathPQ);
    }

    #[test]
    fn spikes_are_clipped_relative_to_the_running_norm() {
        let mut t = Trainer::new(TrainConfig::default(), 2).unwrap();
        let mut g = [3.0, 4.0];
        t.clip(&mut g, 5.0);
        assert_eq!((g, t.state.grad_norm_ema), ([3.0, 4.0], 5.0));
        let mut g = [300.0, 400.0];
        t.clip(&mut g, 500.0);
        assert!((g[0] - 30.0).abs() < 1e-12 && (g[1] - 40.0).abs() < 1e-12);
        assert!((t.state.grad_norm_ema - (0.99 * 5.0 + 0.01 * 50.0)).abs() < 1e-12);

        let mut off = Trainer::new(TrainConfig { clip_factor: 0.0, ..Default::default() }, 2).unwrap();
        off.clip(&mut [3.0, 4.0], 5.0);
        let mut g = [300.0, 400.0];
        off.clip(&mut g, 500.0);
        assert_eq!(g, [300.0, 400.0]);
        assert!(TrainConfig { clip_factor: 0.5, ..Default::default() }.validate().is_err());
    }
}
