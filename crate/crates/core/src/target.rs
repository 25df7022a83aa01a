//! Unnormalized target densities `p(x) ∝ exp(−S(x))`.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::flow::Flow;
use crate::matrix::Matrix;
use crate::{Error, Result};

/// An action `S` on `ℝ^dim`, evaluated row-wise on `n × dim` batches.
pub trait Target: Sync + Send {
    fn dim(&self) -> usize;

    /// Per-row action, `n × 1`.
    fn action_on(&self, tape: &mut Tape, x: Var) -> Result<Var>;

    /// Whether `S(−x) = S(x)`.
    fn is_even(&self) -> bool {
        false
    }

    fn action(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.check(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let s = self.action_on(&mut tape, xv)?;
        Ok(tape.value(s).as_slice().to_vec())
    }

    /// Per-row action and `∂S/∂x`.
    fn action_and_grad(&self, x: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        self.check(x)?;
        let mut tape = Tape::new();
        let xv = tape.var(x.clone())?;
        let s = self.action_on(&mut tape, xv)?;
        let total = tape.sum(s)?;
        let g = tape.gradient(total, &[xv])?.pop().expect("one gradient");
        Ok((tape.value(s).as_slice().to_vec(), g))
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::usage("configuration length does not match the target"));
        }
        Ok(())
    }
}

/// Lattice double-well action with periodic boundary,
/// `S = a Σ_t [ m0/2 (x_{t+1} − x_t)² + m0 μ²/2 x_t² + λ/4 x_t⁴ ]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleWell {
    pub sites: usize,
    pub a: f64,
    pub m0: f64,
    pub mu2: f64,
    pub lambda: f64,
}

impl DoubleWell {
    /// `a = 1`, `m0 = 2.75`, `μ² = −1`, `λ = 1`.
    pub fn new(sites: usize) -> Self {
        Self { sites, a: 1.0, m0: 2.75, mu2: -1.0, lambda: 1.0 }
    }

    pub fn with_mass(sites: usize, m0: f64) -> Self {
        Self { m0, ..Self::new(sites) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sites < 2 {
            return Err(Error::usage("double well needs at least two sites"));
        }
        if !(self.a > 0.0) || !(self.lambda >= 0.0) || !self.m0.is_finite() || !self.mu2.is_finite() {
            return Err(Error::usage("double well parameters out of range (a > 0, lambda >= 0)"));
        }
        Ok(())
    }

    /// Location `±x*` of the potential minima, when `μ² < 0`.
    pub fn minimum(&self) -> f64 {
        crate::math::sqrt(-self.m0 * self.mu2 / self.lambda)
    }

    fn row_action_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
        let t = x.len();
        let (a, m0) = (self.a, self.m0);
        let mut s = 0.0;
        for i in 0..t {
            let next = x[(i + 1) % t];
            let prev = x[(i + t - 1) % t];
            let d = next - x[i];
            let x2 = x[i] * x[i];
            s += 0.5 * m0 * d * d + 0.5 * m0 * self.mu2 * x2 + 0.25 * self.lambda * x2 * x2;
            g[i] = a * (m0 * (2.0 * x[i] - next - prev) + m0 * self.mu2 * x[i] + self.lambda * x2 * x[i]);
        }
        a * s
    }
}

impl Target for DoubleWell {
    fn dim(&self) -> usize {
        self.sites
    }

    fn is_even(&self) -> bool {
        true
    }

    fn action_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.validate()?;
        let t = self.sites;
        let roll: Vec<usize> = (0..t).map(|i| (i + 1) % t).collect();
        let next = tape.select_cols(x, &roll)?;
        let d = tape.sub(next, x)?;
        let d2 = tape.square(d)?;
        let kin = tape.row_sum(d2)?;
        let kin = tape.scale(kin, 0.5 * self.a * self.m0)?;
        let x2 = tape.square(x)?;
        let q = tape.row_sum(x2)?;
        let q = tape.scale(q, 0.5 * self.a * self.m0 * self.mu2)?;
        let x4 = tape.square(x2)?;
        let r = tape.row_sum(x4)?;
        let r = tape.scale(r, 0.25 * self.a * self.lambda)?;
        let s = tape.add(kin, q)?;
        tape.add(s, r)
    }

    fn action_and_grad(&self, x: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        self.validate()?;
        self.check(x)?;
        let mut g = Matrix::zeros(x.rows(), x.cols());
        let mut s = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            s.push(self.row_action_grad(x.row(i), g.row_mut(i)));
        }
        if !s.iter().all(|v| v.is_finite()) || !g.is_finite() {
            return Err(Error::Numeric("double-well action"));
        }
        Ok((s, g))
    }
}

/// Diagonal Gaussian action `S = Σ (x − μ)² / (2σ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTarget {
    mean: Vec<f64>,
    stddev: Vec<f64>,
}

impl GaussianTarget {
    pub fn new(mean: &[f64], stddev: &[f64]) -> Result<Self> {
        if mean.len() != stddev.len() || mean.is_empty() {
            return Err(Error::usage("mean and stddev must have the same nonzero length"));
        }
        if stddev.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::usage("stddev must be positive"));
        }
        Ok(Self { mean: mean.to_vec(), stddev: stddev.to_vec() })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn stddev(&self) -> &[f64] {
        &self.stddev
    }
}

impl Target for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn is_even(&self) -> bool {
        self.mean.iter().all(|&m| m == 0.0)
    }

    fn action_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.value(x).rows();
        let mu = tape.constant(Matrix::row_vector(&self.mean))?;
        let mu = tape.repeat_rows(mu, n)?;
        let prec: Vec<f64> = self.stddev.iter().map(|s| 0.5 / (s * s)).collect();
        let prec = tape.constant(Matrix::row_vector(&prec))?;
        let prec = tape.repeat_rows(prec, n)?;
        let d = tape.sub(x, mu)?;
        let d2 = tape.square(d)?;
        let w = tape.mul(d2, prec)?;
        tape.row_sum(w)
    }

    fn action_and_grad(&self, x: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        self.check(x)?;
        let mut g = Matrix::zeros(x.rows(), x.cols());
        let mut s = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let mut acc = 0.0;
            for (j, gj) in g.row_mut(i).iter_mut().enumerate() {
                let d = x.get(i, j) - self.mean[j];
                let s2 = self.stddev[j] * self.stddev[j];
                acc += 0.5 * d * d / s2;
                *gj = d / s2;
            }
            s.push(acc);
        }
        Ok((s, g))
    }
}

/// Action `S(x) = −log q(x)` of a frozen copy of a flow, so that the
/// normalized target equals the flow's density exactly.
#[derive(Debug, Clone)]
pub struct SelfTarget<F> {
    frozen: F,
}

impl<F: Flow + Clone> SelfTarget<F> {
    pub fn new(flow: &F) -> Self {
        Self { frozen: flow.clone() }
    }

    pub fn frozen(&self) -> &F {
        &self.frozen
    }
}

impl<F: Flow + Clone> Target for SelfTarget<F> {
    fn dim(&self) -> usize {
        self.frozen.dim()
    }

    fn action_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let theta = tape.constant(Matrix::row_vector(self.frozen.params()))?;
        let lq = self.frozen.log_q_on(tape, theta, x)?;
        tape.neg(lq)
    }
}
