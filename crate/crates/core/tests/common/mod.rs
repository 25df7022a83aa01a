#![allow(dead_code)]

use flowpath_core::flow::{Flow, RealNvp, RealNvpSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A RealNVP with every parameter perturbed so no layer is the identity.
pub fn scrambled(spec: RealNvpSpec, seed: u64, amp: f64) -> RealNvp {
    let mut flow = RealNvp::new(spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for p in flow.params_mut() {
        *p += amp * (2.0 * rng.random::<f64>() - 1.0);
    }
    flow
}

pub fn small_spec(dim: usize, n_layers: usize) -> RealNvpSpec {
    RealNvpSpec { dim, n_layers, hidden_layers: 2, width: 8, base_stddev: 1.0, clamp: 5.0 }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
