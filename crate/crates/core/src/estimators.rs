//! Gradient estimators for the reverse KL `KL(q_θ‖p)` and the forward KL
//! `KL(p‖q_θ)`, all computed from a batch of base samples `z ∼ q_Z`.
//!
//! | id        | gradient                                          |
//! |-----------|---------------------------------------------------|
//! | `RepQP`   | `1/N Σ d/dθ [S(g_θ(z)) + log q_θ(g_θ(z))]`        |
//! | `PathQP`  | `1/N Σ ▼[S + log q_θ]`                            |
//! | `Score`   | `1/N Σ ∂_θ log q_θ(x)` at fixed `x`               |
//! | `ReinfPQ` | `−Σ ŵ_i ∂_θ log q_θ(x_i)`                         |
//! | `PathPQ`  | `−Σ ŵ_i ▼ log w̃_i`                                |
//! | `ZPathPQ` | `−Σ (ŵ_i − ŵ_i²) ▼ log w̃_i`                       |
//!
//! Here `▼` is the path derivative (through `x = g_θ(z)` only),
//! `log w̃ = −S − log q_θ` and `ŵ` are the self-normalized weights.
//!
//! The path derivative of `log q_θ` uses two passes. A probe pass computes
//! `x' = g_θ(z)` without parameter gradients, evaluates `log q_θ(x')` through
//! the inverse flow and takes `G = ∂ log q_θ(x')/∂x'`. A contraction pass then
//! records `x = g_θ(z)` with θ differentiable and backpropagates
//! `Σ c_i (S(x_i) + G_i · x_i)` with `G` held constant. Neither pass keeps a
//! per-sample Jacobian.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::autodiff::Tape;
use crate::flow::{check_dim, Flow};
use crate::math;
use crate::matrix::Matrix;
use crate::parallel;
use crate::sampling;
use crate::target::Target;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorId {
    RepQP,
    PathQP,
    Score,
    ReinfPQ,
    PathPQ,
    ZPathPQ,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 6] = [Self::RepQP, Self::PathQP, Self::Score, Self::ReinfPQ, Self::PathPQ, Self::ZPathPQ];

    /// The five training estimators (everything except the bare score term).
    pub const TRAINABLE: [EstimatorId; 5] = [Self::RepQP, Self::PathQP, Self::ReinfPQ, Self::PathPQ, Self::ZPathPQ];

    pub fn name(self) -> &'static str {
        match self {
            Self::RepQP => "RepQP",
            Self::PathQP => "PathQP",
            Self::Score => "Score",
            Self::ReinfPQ => "ReinfPQ",
            Self::PathPQ => "PathPQ",
            Self::ZPathPQ => "ZPathPQ",
        }
    }

    /// Estimates the forward KL gradient.
    pub fn is_forward(self) -> bool {
        matches!(self, Self::ReinfPQ | Self::PathPQ | Self::ZPathPQ)
    }

    pub fn is_path(self) -> bool {
        matches!(self, Self::PathQP | Self::PathPQ | Self::ZPathPQ)
    }

    pub fn min_batch(self) -> usize {
        if self.is_forward() {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Usage(alloc::format!("unknown estimator `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub estimator: EstimatorId,
    pub grad: Vec<f64>,
    pub batch_size: usize,
    /// `log w̃_i = −S(x_i) − log q_θ(x_i)` for every sample.
    pub log_weights: Vec<f64>,
    /// Self-normalized weights, for the forward-KL estimators.
    pub weights: Option<Vec<f64>>,
    pub grad_norm: f64,
    /// Monte-Carlo reverse KL surrogate `mean(S + log q)`.
    pub loss: f64,
}

/// Quantities from the probe pass for one shard.
struct Probe {
    /// `∂ log q_θ(x')/∂x'` per row.
    g: Matrix,
    log_q: Vec<f64>,
    action: Vec<f64>,
}

fn probe<F: Flow, T: Target>(flow: &F, target: &T, z: &Matrix) -> Result<Probe> {
    let (x, _) = flow.forward(z)?;
    let action = target.action(&x)?;
    let mut tape = Tape::new();
    let theta = tape.constant(Matrix::row_vector(flow.params()))?;
    let xv = tape.var(x)?;
    let lq = flow.log_q_on(&mut tape, theta, xv)?;
    let total = tape.sum(lq)?;
    let log_q = tape.value(lq).as_slice().to_vec();
    let g = tape.gradient(total, &[xv])?.pop().expect("one gradient");
    Ok(Probe { g, log_q, action })
}

/// `d/dθ Σ_i c_i (S(g_θ(z_i)) + G_i · g_θ(z_i))` with `G` constant.
fn contract<F: Flow, T: Target>(flow: &F, target: &T, z: &Matrix, g: &Matrix, c: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let theta = tape.var(Matrix::row_vector(flow.params()))?;
    let zv = tape.constant(z.clone())?;
    let (x, _) = flow.forward_on(&mut tape, theta, zv)?;
    let s = target.action_on(&mut tape, x)?;
    let cv = tape.constant(Matrix::column(c))?;
    let ls = tape.dot(cv, s)?;
    let mut cg = g.clone();
    for (i, &ci) in c.iter().enumerate() {
        cg.row_mut(i).iter_mut().for_each(|v| *v *= ci);
    }
    let cg = tape.constant(cg)?;
    let lg = tape.dot(cg, x)?;
    let loss = tape.add(ls, lg)?;
    Ok(tape.gradient(loss, &[theta])?.pop().expect("one gradient").into_vec())
}

/// `d/dθ Σ_i c_i log q_θ(x_i)` at fixed `x`.
fn score_contract<F: Flow>(flow: &F, x: &Matrix, c: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let theta = tape.var(Matrix::row_vector(flow.params()))?;
    let xv = tape.constant(x.clone())?;
    let lq = flow.log_q_on(&mut tape, theta, xv)?;
    let cv = tape.constant(Matrix::column(c))?;
    let loss = tape.dot(cv, lq)?;
    Ok(tape.gradient(loss, &[theta])?.pop().expect("one gradient").into_vec())
}

/// Gradient of `Σ_i c_i [S(g_θ(z_i)) + log q_θ(g_θ(z_i))]` through the full
/// composite; returns `(grad, S, log q)`.
fn total_contract<F: Flow, T: Target>(flow: &F, target: &T, z: &Matrix, c: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let theta = tape.var(Matrix::row_vector(flow.params()))?;
    let zv = tape.constant(z.clone())?;
    let (x, ld) = flow.forward_on(&mut tape, theta, zv)?;
    let s = target.action_on(&mut tape, x)?;
    let d = tape.sub(s, ld)?;
    let cv = tape.constant(Matrix::column(c))?;
    let loss = tape.dot(cv, d)?;
    let grad = tape.gradient(loss, &[theta])?.pop().expect("one gradient").into_vec();
    let action = tape.value(s).as_slice().to_vec();
    let lz = flow.base().log_prob_batch(z);
    let log_q = lz.iter().zip(tape.value(ld).as_slice()).map(|(a, b)| a - b).collect();
    Ok((grad, action, log_q))
}

fn sum_into(acc: &mut [f64], part: &[f64]) {
    acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
}

fn reduce(parts: Vec<Vec<f64>>, n_params: usize) -> Vec<f64> {
    let mut grad = vec![0.0; n_params];
    for p in &parts {
        sum_into(&mut grad, p);
    }
    grad
}

/// Self-normalized weights `ŵ_i = w̃_i / Σ w̃` in log space.
pub fn normalized_weights(log_w: &[f64]) -> Result<Vec<f64>> {
    let lse = math::log_sum_exp(log_w);
    if !lse.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    Ok(log_w.iter().map(|&l| math::exp(l - lse)).collect())
}

/// `ŵ_i (1 − ŵ_i)`, with `1 − ŵ_i` taken as `Σ_{j≠i} ŵ_j` for the dominant
/// sample so it keeps full relative precision when `ŵ_i → 1`.
fn zpath_coefficients(log_w: &[f64], w: &[f64]) -> Vec<f64> {
    let lse = math::log_sum_exp(log_w);
    let mut c: Vec<f64> = w.iter().map(|&wi| wi * (1.0 - wi)).collect();
    if let Some((k, _)) = w.iter().enumerate().find(|(_, &wi)| wi > 0.5) {
        let others: Vec<f64> = log_w.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, &l)| l).collect();
        let rest = math::exp(math::log_sum_exp(&others) - lse);
        c[k] = w[k] * rest;
    }
    c
}

fn rows(z: &Matrix, r: &core::ops::Range<usize>) -> Matrix {
    z.slice_rows(r.start, r.end)
}

fn finish(
    estimator: EstimatorId,
    grad: Vec<f64>,
    action: &[f64],
    log_q: &[f64],
    weights: Option<Vec<f64>>,
) -> Result<GradientEstimate> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("gradient"));
    }
    let n = action.len();
    let log_weights: Vec<f64> = action.iter().zip(log_q).map(|(s, l)| -s - l).collect();
    let loss = action.iter().zip(log_q).map(|(s, l)| s + l).sum::<f64>() / n as f64;
    let grad_norm = math::norm(&grad);
    Ok(GradientEstimate { estimator, grad, batch_size: n, log_weights, weights, grad_norm, loss })
}

/// Evaluates estimator `id` on the base-sample batch `z`, sharding the batch
/// over `workers` threads. Results depend on the worker count only through
/// the (fixed) shard reduction order.
pub fn estimate<F: Flow, T: Target>(id: EstimatorId, flow: &F, target: &T, z: &Matrix, workers: usize) -> Result<GradientEstimate> {
    check_dim(flow.dim(), z)?;
    if target.dim() != flow.dim() {
        return Err(Error::usage("flow and target dimensions differ"));
    }
    let n = z.rows();
    if n < id.min_batch() {
        return Err(Error::Usage(alloc::format!("{id} needs a batch of at least {}", id.min_batch())));
    }
    let p = flow.params().len();
    let shards = parallel::split(n, workers.max(1));
    let inv_n = 1.0 / n as f64;
    match id {
        EstimatorId::RepQP => {
            let parts = parallel::map_indexed(shards.len(), workers, |k| {
                let zs = rows(z, &shards[k]);
                total_contract(flow, target, &zs, &vec![inv_n; zs.rows()])
            });
            let (mut grads, mut action, mut log_q) = (Vec::new(), Vec::with_capacity(n), Vec::with_capacity(n));
            for part in parts {
                let (g, s, l) = part?;
                grads.push(g);
                action.extend(s);
                log_q.extend(l);
            }
            finish(id, reduce(grads, p), &action, &log_q, None)
        }
        EstimatorId::Score => {
            let parts = parallel::map_indexed(shards.len(), workers, |k| -> Result<_> {
                let zs = rows(z, &shards[k]);
                let (x, ld) = flow.forward(&zs)?;
                let action = target.action(&x)?;
                let lz = flow.base().log_prob_batch(&zs);
                let log_q: Vec<f64> = lz.iter().zip(&ld).map(|(a, b)| a - b).collect();
                let g = score_contract(flow, &x, &vec![inv_n; zs.rows()])?;
                Ok((g, action, log_q))
            });
            let (mut grads, mut action, mut log_q) = (Vec::new(), Vec::with_capacity(n), Vec::with_capacity(n));
            for part in parts {
                let (g, s, l) = part?;
                grads.push(g);
                action.extend(s);
                log_q.extend(l);
            }
            finish(id, reduce(grads, p), &action, &log_q, None)
        }
        EstimatorId::ReinfPQ => {
            let fwd = parallel::map_indexed(shards.len(), workers, |k| -> Result<_> {
                let zs = rows(z, &shards[k]);
                let (x, ld) = flow.forward(&zs)?;
                let action = target.action(&x)?;
                let lz = flow.base().log_prob_batch(&zs);
                let log_q: Vec<f64> = lz.iter().zip(&ld).map(|(a, b)| a - b).collect();
                Ok((x, action, log_q))
            });
            let (mut xs, mut action, mut log_q) = (Vec::new(), Vec::with_capacity(n), Vec::with_capacity(n));
            for part in fwd {
                let (x, s, l) = part?;
                xs.push(x);
                action.extend(s);
                log_q.extend(l);
            }
            let log_w: Vec<f64> = action.iter().zip(&log_q).map(|(s, l)| -s - l).collect();
            let w = normalized_weights(&log_w)?;
            let parts = parallel::map_indexed(shards.len(), workers, |k| {
                let c: Vec<f64> = w[shards[k].clone()].iter().map(|wi| -wi).collect();
                score_contract(flow, &xs[k], &c)
            });
            let grads = parts.into_iter().collect::<Result<Vec<_>>>()?;
            finish(id, reduce(grads, p), &action, &log_q, Some(w))
        }
        EstimatorId::PathQP | EstimatorId::PathPQ | EstimatorId::ZPathPQ => {
            let probes = parallel::map_indexed(shards.len(), workers, |k| probe(flow, target, &rows(z, &shards[k])));
            let probes = probes.into_iter().collect::<Result<Vec<_>>>()?;
            let action: Vec<f64> = probes.iter().flat_map(|pr| pr.action.iter().copied()).collect();
            let log_q: Vec<f64> = probes.iter().flat_map(|pr| pr.log_q.iter().copied()).collect();
            let (coef, weights) = match id {
                EstimatorId::PathQP => (vec![inv_n; n], None),
                _ => {
                    let log_w: Vec<f64> = action.iter().zip(&log_q).map(|(s, l)| -s - l).collect();
                    let w = normalized_weights(&log_w)?;
                    let c = if id == EstimatorId::PathPQ { w.clone() } else { zpath_coefficients(&log_w, &w) };
                    (c, Some(w))
                }
            };
            let parts = parallel::map_indexed(shards.len(), workers, |k| {
                contract(flow, target, &rows(z, &shards[k]), &probes[k].g, &coef[shards[k].clone()])
            });
            let grads = parts.into_iter().collect::<Result<Vec<_>>>()?;
            finish(id, reduce(grads, p), &action, &log_q, weights)
        }
    }
}

/// Path gradient `▼_θ log q_θ(g_θ(z))` summed over the rows of `z`.
pub fn path_grad_logq<F: Flow>(flow: &F, z: &Matrix) -> Result<Vec<f64>> {
    check_dim(flow.dim(), z)?;
    let (x, _) = flow.forward(z)?;
    let mut tape = Tape::new();
    let theta = tape.constant(Matrix::row_vector(flow.params()))?;
    let xv = tape.var(x)?;
    let lq = flow.log_q_on(&mut tape, theta, xv)?;
    let total = tape.sum(lq)?;
    let g = tape.gradient(total, &[xv])?.pop().expect("one gradient");
    drop(tape);
    let mut tape = Tape::new();
    let theta = tape.var(Matrix::row_vector(flow.params()))?;
    let zv = tape.constant(z.clone())?;
    let (xv, _) = flow.forward_on(&mut tape, theta, zv)?;
    let gv = tape.constant(g)?;
    let loss = tape.dot(gv, xv)?;
    Ok(tape.gradient(loss, &[theta])?.pop().expect("one gradient").into_vec())
}

/// Per-sample terms with unit coefficient, one row per sample (`n × P`):
///
/// * `RepQP`: `d/dθ [S + log q_θ]`
/// * `PathQP`: `▼[S + log q_θ]`
/// * `Score`: `∂_θ log q_θ(x)`
/// * `ReinfPQ`: `−∂_θ log q_θ(x)`
/// * `PathPQ`, `ZPathPQ`: `−▼ log w̃ = ▼[S + log q_θ]`
///
/// The batch estimators are coefficient-weighted sums of these rows.
pub fn per_sample_terms<F: Flow, T: Target>(id: EstimatorId, flow: &F, target: &T, z: &Matrix) -> Result<Matrix> {
    check_dim(flow.dim(), z)?;
    let p = flow.params().len();
    let mut out = Matrix::zeros(z.rows(), p);
    for i in 0..z.rows() {
        let zi = z.slice_rows(i, i + 1);
        let g = match id {
            EstimatorId::RepQP => total_contract(flow, target, &zi, &[1.0])?.0,
            EstimatorId::Score | EstimatorId::ReinfPQ => {
                let (x, _) = flow.forward(&zi)?;
                let c = if id == EstimatorId::Score { 1.0 } else { -1.0 };
                score_contract(flow, &x, &[c])?
            }
            _ => {
                let pr = probe(flow, target, &zi)?;
                contract(flow, target, &zi, &pr.g, &[1.0])?
            }
        };
        out.row_mut(i).copy_from_slice(&g);
    }
    Ok(out)
}

/// Reverse ESS of an estimate's batch.
pub fn batch_reverse_ess(est: &GradientEstimate) -> Result<f64> {
    sampling::reverse_ess(&est.log_weights)
}

impl GradientEstimate {
    pub fn summary(&self) -> alloc::string::String {
        let mut s = self.estimator.to_string();
        s.push_str(&alloc::format!(" N={} |g|={:.3e} loss={:.6}", self.batch_size, self.grad_norm, self.loss));
        s
    }
}
