//! Normalizing flows `x = g_θ(z)` with a diagonal Gaussian base density.
//!
//! A [`Flow`] records its forward and inverse maps on a caller-owned tape
//! with all parameters as one `1 × P` node, so the same code serves plain
//! evaluation (parameters as a constant), parameter gradients and input
//! gradients.

mod affine;
mod realnvp;

pub use affine::AffineFlow;
pub use realnvp::{RealNvp, RealNvpSpec};

use alloc::vec::Vec;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::math::{self, LN_2PI};
use crate::matrix::Matrix;
use crate::{Error, Result};

/// Diagonal Gaussian with mean zero and a common standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseDensity {
    pub dim: usize,
    pub stddev: f64,
}

impl BaseDensity {
    pub fn new(dim: usize, stddev: f64) -> Self {
        assert!(stddev > 0.0, "base stddev must be positive");
        Self { dim, stddev }
    }

    fn log_norm(&self) -> f64 {
        -0.5 * self.dim as f64 * (LN_2PI + 2.0 * math::ln(self.stddev))
    }

    pub fn log_prob(&self, z: &[f64]) -> f64 {
        let s2 = self.stddev * self.stddev;
        -z.iter().map(|v| v * v).sum::<f64>() / (2.0 * s2) + self.log_norm()
    }

    /// Row-wise log-density of an `n × dim` batch.
    pub fn log_prob_batch(&self, z: &Matrix) -> Vec<f64> {
        (0..z.rows()).map(|i| self.log_prob(z.row(i))).collect()
    }

    /// Row-wise log-density recorded on `tape`, `n × 1`.
    pub fn log_prob_on(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let sq = tape.square(z)?;
        let r = tape.row_sum(sq)?;
        let r = tape.scale(r, -0.5 / (self.stddev * self.stddev))?;
        tape.shift(r, self.log_norm())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Matrix {
        let data = (0..n * self.dim).map(|_| self.stddev * rng.sample::<f64, _>(StandardNormal)).collect();
        Matrix::from_vec(n, self.dim, data)
    }
}

/// A bijection `g_θ` with tractable Jacobian determinant.
///
/// `forward_on` and `inverse_on` take the parameters as a `1 × P` node and a
/// batch as an `n × dim` node, and return the image together with the
/// per-row log-determinant (`n × 1`) of the map that was applied.
pub trait Flow: Sync + Send {
    fn dim(&self) -> usize;
    fn base(&self) -> &BaseDensity;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    fn forward_on(&self, tape: &mut Tape, theta: Var, z: Var) -> Result<(Var, Var)>;
    fn inverse_on(&self, tape: &mut Tape, theta: Var, x: Var) -> Result<(Var, Var)>;

    /// `log q_θ(x)` per row, `n × 1`.
    fn log_q_on(&self, tape: &mut Tape, theta: Var, x: Var) -> Result<Var> {
        let (z, ld) = self.inverse_on(tape, theta, x)?;
        let lz = self.base().log_prob_on(tape, z)?;
        tape.add(lz, ld)
    }

    fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        let p = self.params_mut();
        if p.len() != theta.len() {
            return Err(Error::usage("parameter vector length mismatch"));
        }
        p.copy_from_slice(theta);
        Ok(())
    }

    /// `(x, log|∂g/∂z|)` for a batch of base samples.
    fn forward(&self, z: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        check_dim(self.dim(), z)?;
        let mut tape = Tape::new();
        let theta = tape.constant(Matrix::row_vector(self.params()))?;
        let zv = tape.constant(z.clone())?;
        let (x, ld) = self.forward_on(&mut tape, theta, zv)?;
        Ok((tape.value(x).clone(), tape.value(ld).as_slice().to_vec()))
    }

    /// `(z, log|∂g⁻¹/∂x|)`.
    fn inverse(&self, x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        check_dim(self.dim(), x)?;
        let mut tape = Tape::new();
        let theta = tape.constant(Matrix::row_vector(self.params()))?;
        let xv = tape.constant(x.clone())?;
        let (z, ld) = self.inverse_on(&mut tape, theta, xv)?;
        Ok((tape.value(z).clone(), tape.value(ld).as_slice().to_vec()))
    }

    fn log_prob(&self, x: &Matrix) -> Result<Vec<f64>> {
        let (z, ld) = self.inverse(x)?;
        Ok(self.base().log_prob_batch(&z).iter().zip(&ld).map(|(a, b)| a + b).collect())
    }

    /// Draws `n` samples; returns `(z, x, log q_θ(x))`.
    fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(Matrix, Matrix, Vec<f64>)>
    where
        Self: Sized,
    {
        let z = self.base().sample(n, rng);
        let (x, ld) = self.forward(&z)?;
        let lq = self.base().log_prob_batch(&z).iter().zip(&ld).map(|(a, b)| a - b).collect();
        Ok((z, x, lq))
    }
}

pub(crate) fn check_dim(dim: usize, m: &Matrix) -> Result<()> {
    if m.cols() != dim {
        return Err(Error::usage("batch width does not match the flow dimension"));
    }
    Ok(())
}
