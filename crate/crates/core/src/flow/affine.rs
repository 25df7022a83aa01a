use alloc::vec::Vec;

use super::{BaseDensity, Flow};
use crate::autodiff::{Tape, Var};
use crate::{Error, Result};

/// Elementwise location-scale flow `x = loc + scale ⊙ z`.
///
/// Parameters are `[loc_0..loc_d, scale_0..scale_d]` with the scale used
/// directly (not log-parameterized), so with a unit base the Fisher
/// information per coordinate is `diag(1/scale², 2/scale²)`.
#[derive(Debug, Clone)]
pub struct AffineFlow {
    base: BaseDensity,
    params: Vec<f64>,
}

impl AffineFlow {
    pub fn new(loc: &[f64], scale: &[f64], base_stddev: f64) -> Result<Self> {
        if loc.len() != scale.len() || loc.is_empty() {
            return Err(Error::usage("loc and scale must have the same nonzero length"));
        }
        if scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::usage("scale must be positive"));
        }
        let mut params = loc.to_vec();
        params.extend_from_slice(scale);
        Ok(Self { base: BaseDensity::new(loc.len(), base_stddev), params })
    }

    pub fn loc(&self) -> &[f64] {
        &self.params[..self.base.dim]
    }

    pub fn scale(&self) -> &[f64] {
        &self.params[self.base.dim..]
    }

    fn parts(&self, tape: &mut Tape, theta: Var, n: usize) -> Result<(Var, Var, Var)> {
        let d = self.base.dim;
        if tape.value(theta).shape() != (1, 2 * d) {
            return Err(Error::usage("parameter node has the wrong shape"));
        }
        let loc = tape.slice(theta, 0, 1, d)?;
        let scale = tape.slice(theta, d, 1, d)?;
        let log_scale = tape.log(scale)?;
        let ld = tape.row_sum(log_scale)?;
        Ok((tape.repeat_rows(loc, n)?, tape.repeat_rows(scale, n)?, tape.repeat_rows(ld, n)?))
    }
}

impl Flow for AffineFlow {
    fn dim(&self) -> usize {
        self.base.dim
    }

    fn base(&self) -> &BaseDensity {
        &self.base
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward_on(&self, tape: &mut Tape, theta: Var, z: Var) -> Result<(Var, Var)> {
        let n = tape.value(z).rows();
        let (loc, scale, ld) = self.parts(tape, theta, n)?;
        let m = tape.mul(z, scale)?;
        Ok((tape.add(m, loc)?, ld))
    }

    fn inverse_on(&self, tape: &mut Tape, theta: Var, x: Var) -> Result<(Var, Var)> {
        let n = tape.value(x).rows();
        let (loc, scale, ld) = self.parts(tape, theta, n)?;
        let d = tape.sub(x, loc)?;
        let z = tape.div(d, scale)?;
        Ok((z, tape.neg(ld)?))
    }
}
