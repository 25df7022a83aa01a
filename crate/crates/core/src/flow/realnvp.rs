use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BaseDensity, Flow};
use crate::autodiff::{Tape, Var};
use crate::math;
use crate::matrix::Matrix;
use crate::{Error, Result};

/// Architecture of a [`RealNvp`] flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealNvpSpec {
    /// Number of lattice sites.
    pub dim: usize,
    /// Number of coupling layers.
    pub n_layers: usize,
    /// Hidden (tanh) layers in each scale and shift network.
    pub hidden_layers: usize,
    pub width: usize,
    pub base_stddev: f64,
    /// Scale outputs are `clamp · tanh(raw)`.
    pub clamp: f64,
}

impl Default for RealNvpSpec {
    fn default() -> Self {
        Self { dim: 8, n_layers: 8, hidden_layers: 3, width: 200, base_stddev: 10.0, clamp: 5.0 }
    }
}

impl RealNvpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_layers == 0 {
            return Err(Error::usage("flow needs at least one site and one layer"));
        }
        if self.hidden_layers > 0 && self.width == 0 {
            return Err(Error::usage("hidden width must be positive"));
        }
        if !(self.base_stddev > 0.0 && self.base_stddev.is_finite()) {
            return Err(Error::usage("base stddev must be positive"));
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return Err(Error::usage("scale clamp must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Dense {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Debug, Clone)]
struct Layer {
    cond: Vec<usize>,
    trans: Vec<usize>,
    /// Scale network, then shift network.
    nets: [Vec<Dense>; 2],
    range: Range<usize>,
}

/// Stack of affine coupling layers on a 1-D lattice.
///
/// Layer `l` conditions on the sites `t` with `t + l` even and transforms
/// the rest: `x_t = z_t · exp(s) + t(z_cond)`. Both conditioners are tanh
/// MLPs whose last layer starts at zero, so a fresh flow is the identity.
#[derive(Debug, Clone)]
pub struct RealNvp {
    spec: RealNvpSpec,
    seed: u64,
    base: BaseDensity,
    layers: Vec<Layer>,
    params: Vec<f64>,
}

impl RealNvp {
    /// Builds and initializes a flow. Panics on an invalid spec; see
    /// [`RealNvpSpec::validate`].
    pub fn new(spec: RealNvpSpec, seed: u64) -> Self {
        spec.validate().expect("invalid RealNVP spec");
        let (layers, n_params) = layout(&spec);
        let mut params = vec![0.0; n_params];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &layers {
            for net in &layer.nets {
                let last = net.len() - 1;
                for (k, d) in net.iter().enumerate() {
                    if k == last {
                        continue;
                    }
                    let bound = if d.fan_in == 0 { 0.0 } else { 1.0 / math::sqrt(d.fan_in as f64) };
                    for p in &mut params[d.w..d.w + d.fan_in * d.fan_out] {
                        *p = bound * (2.0 * rng.random::<f64>() - 1.0);
                    }
                    for p in &mut params[d.b..d.b + d.fan_out] {
                        *p = bound * (2.0 * rng.random::<f64>() - 1.0);
                    }
                }
            }
        }
        Self { base: BaseDensity::new(spec.dim, spec.base_stddev), spec, seed, layers, params }
    }

    /// Rebuilds a flow from a stored parameter vector.
    pub fn from_params(spec: RealNvpSpec, seed: u64, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let (layers, n_params) = layout(&spec);
        if params.len() != n_params {
            return Err(Error::usage("parameter count does not match the architecture"));
        }
        Ok(Self { base: BaseDensity::new(spec.dim, spec.base_stddev), spec, seed, layers, params })
    }

    pub fn spec(&self) -> &RealNvpSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Slice of θ owned by coupling layer `l`.
    pub fn layer_range(&self, l: usize) -> Range<usize> {
        self.layers[l].range.clone()
    }

    /// Sites transformed by layer `l`.
    pub fn transformed_sites(&self, l: usize) -> &[usize] {
        &self.layers[l].trans
    }

    /// Makes layer `l` the constant affine map `x_t = z_t · e^{s0} + t0` on
    /// its transformed sites by zeroing the output weights and setting the
    /// output biases. Requires `|s0| < clamp`.
    pub fn set_layer_affine(&mut self, l: usize, s0: f64, t0: f64) -> Result<()> {
        if s0.abs() >= self.spec.clamp {
            return Err(Error::usage("constant scale must lie inside the clamp"));
        }
        let layer = self.layers.get(l).ok_or_else(|| Error::usage("layer index out of range"))?;
        for (k, value) in [(0, math::atanh(s0 / self.spec.clamp)), (1, t0)] {
            let d = layer.nets[k].last().expect("net has an output layer");
            self.params[d.w..d.w + d.fan_in * d.fan_out].iter_mut().for_each(|p| *p = 0.0);
            self.params[d.b..d.b + d.fan_out].iter_mut().for_each(|p| *p = value);
        }
        Ok(())
    }

    fn net_on(&self, tape: &mut Tape, theta: Var, net: &[Dense], input: Var) -> Result<Var> {
        let mut h = input;
        let last = net.len() - 1;
        for (k, d) in net.iter().enumerate() {
            let w = tape.slice(theta, d.w, d.fan_out, d.fan_in)?;
            let b = tape.slice(theta, d.b, 1, d.fan_out)?;
            h = tape.affine(h, w, b)?;
            if k != last {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }

    fn coupling_on(&self, tape: &mut Tape, theta: Var, layer: &Layer, x: Var, inverse: bool) -> Result<(Var, Var)> {
        let xc = tape.select_cols(x, &layer.cond)?;
        let xt = tape.select_cols(x, &layer.trans)?;
        let raw = self.net_on(tape, theta, &layer.nets[0], xc)?;
        let s = tape.tanh(raw)?;
        let s = tape.scale(s, self.spec.clamp)?;
        let shift = self.net_on(tape, theta, &layer.nets[1], xc)?;
        let yt = if inverse {
            let d = tape.sub(xt, shift)?;
            let ns = tape.neg(s)?;
            let e = tape.exp(ns)?;
            tape.mul(d, e)?
        } else {
            let e = tape.exp(s)?;
            let m = tape.mul(xt, e)?;
            tape.add(m, shift)?
        };
        let y = tape.merge_cols(xc, &layer.cond, yt, &layer.trans)?;
        let ld = tape.row_sum(s)?;
        Ok((y, ld))
    }

    fn check(&self, tape: &Tape, theta: Var, x: Var) -> Result<()> {
        if tape.value(theta).shape() != (1, self.params.len()) {
            return Err(Error::usage("parameter node has the wrong shape"));
        }
        if tape.value(x).cols() != self.spec.dim {
            return Err(Error::usage("batch width does not match the flow dimension"));
        }
        Ok(())
    }
}

fn layout(spec: &RealNvpSpec) -> (Vec<Layer>, usize) {
    let mut offset = 0;
    let mut layers = Vec::with_capacity(spec.n_layers);
    for l in 0..spec.n_layers {
        let (cond, trans): (Vec<usize>, Vec<usize>) = (0..spec.dim).partition(|t| (t + l) % 2 == 0);
        let start = offset;
        let mut net = || {
            let mut dense = Vec::with_capacity(spec.hidden_layers + 1);
            let mut fan_in = cond.len();
            for k in 0..=spec.hidden_layers {
                let fan_out = if k == spec.hidden_layers { trans.len() } else { spec.width };
                let w = offset;
                let b = w + fan_in * fan_out;
                offset = b + fan_out;
                dense.push(Dense { w, b, fan_in, fan_out });
                fan_in = fan_out;
            }
            dense
        };
        let nets = [net(), net()];
        layers.push(Layer { cond, trans, nets, range: start..offset });
    }
    (layers, offset)
}

impl Flow for RealNvp {
    fn dim(&self) -> usize {
        self.spec.dim
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
        self.check(tape, theta, z)?;
        let n = tape.value(z).rows();
        let mut ld = tape.constant(Matrix::zeros(n, 1))?;
        let mut x = z;
        for layer in self.layers.iter().filter(|l| !l.trans.is_empty()) {
            let (y, s) = self.coupling_on(tape, theta, layer, x, false)?;
            ld = tape.add(ld, s)?;
            x = y;
        }
        Ok((x, ld))
    }

    fn inverse_on(&self, tape: &mut Tape, theta: Var, x: Var) -> Result<(Var, Var)> {
        self.check(tape, theta, x)?;
        let n = tape.value(x).rows();
        let mut ld = tape.constant(Matrix::zeros(n, 1))?;
        let mut z = x;
        for layer in self.layers.iter().rev().filter(|l| !l.trans.is_empty()) {
            let (y, s) = self.coupling_on(tape, theta, layer, z, true)?;
            ld = tape.sub(ld, s)?;
            z = y;
        }
        Ok((z, ld))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dim: usize, n_layers: usize) -> RealNvpSpec {
        RealNvpSpec { dim, n_layers, hidden_layers: 1, width: 6, ..Default::default() }
    }

    #[test]
    fn parameter_count_matches_architecture() {
        let spec = RealNvpSpec { dim: 4, n_layers: 2, hidden_layers: 2, width: 5, ..Default::default() };
        let flow = RealNvp::new(spec, 0);
        // per net: (2·5+5) + (5·5+5) + (5·2+2) = 57; two nets per layer
        assert_eq!(flow.n_params(), 2 * 2 * 57);
        assert_eq!(flow.layer_range(1), 114..228);
    }

    #[test]
    fn masks_alternate() {
        let flow = RealNvp::new(small(5, 3), 0);
        assert_eq!(flow.transformed_sites(0), &[1, 3]);
        assert_eq!(flow.transformed_sites(1), &[0, 2, 4]);
        assert_eq!(flow.transformed_sites(2), &[1, 3]);
    }

    #[test]
    fn fresh_flow_is_identity() {
        let flow = RealNvp::new(small(4, 4), 3);
        let z = Matrix::from_rows(&[[0.3, -1.0, 2.0, 0.1], [5.0, 6.0, -7.0, 8.0]]);
        let (x, ld) = flow.forward(&z).unwrap();
        assert_eq!(x, z);
        assert_eq!(ld, vec![0.0, 0.0]);
    }

    #[test]
    fn constant_affine_layer_by_hand() {
        let mut flow = RealNvp::new(RealNvpSpec { dim: 2, n_layers: 1, hidden_layers: 1, width: 4, ..Default::default() }, 1);
        flow.set_layer_affine(0, 0.7, -0.4).unwrap();
        let z = Matrix::from_rows(&[[1.5, -2.0]]);
        let (x, ld) = flow.forward(&z).unwrap();
        assert!((x.get(0, 0) - 1.5).abs() < 1e-15);
        assert!((x.get(0, 1) - (-2.0 * 0.7f64.exp() - 0.4)).abs() < 1e-12);
        assert!((ld[0] - 0.7).abs() < 1e-12);
        let (back, ldi) = flow.inverse(&x).unwrap();
        assert!((back.get(0, 1) - (x.get(0, 1) + 0.4) * (-0.7f64).exp()).abs() < 1e-12);
        assert!((ldi[0] + 0.7).abs() < 1e-12);
        let lq = flow.log_prob(&x).unwrap()[0];
        assert!((lq - (flow.base().log_prob(z.row(0)) - 0.7)).abs() < 1e-12);
        assert!(flow.set_layer_affine(0, 5.0, 0.0).is_err());
    }

    #[test]
    fn single_site_flow_works() {
        let mut flow = RealNvp::new(small(1, 2), 0);
        flow.set_layer_affine(1, 0.5, 1.0).unwrap();
        let z = Matrix::column(&[0.0, 2.0]);
        let (x, ld) = flow.forward(&z).unwrap();
        assert!((x.get(1, 0) - (2.0 * 0.5f64.exp() + 1.0)).abs() < 1e-12);
        assert!((ld[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_wrong_width() {
        let flow = RealNvp::new(small(4, 2), 0);
        assert!(flow.forward(&Matrix::zeros(2, 3)).is_err());
        assert!(RealNvp::from_params(small(4, 2), 0, vec![0.0; 3]).is_err());
    }
}
