//! Normalizing flows for variational inference, trained with path-gradient
//! estimators of the reverse and forward Kullback-Leibler divergence.
//!
//! The crate is `no_std` + `alloc`. Everything here is pure computation:
//! a small reverse-mode tape ([`autodiff`]), RealNVP and affine flows
//! ([`flow`]), lattice and analytic targets ([`target`]), the gradient
//! estimators ([`estimators`]), importance-sampling diagnostics and an
//! overrelaxed HMC sampler ([`sampling`]), the optimizer pieces
//! ([`training`]) and oracle-backed experiments ([`diagnostics`]).
//! File formats, wall-clock timing and the CLI live in the `flowpath` crate.
//!
//! ```
//! use flowpath_core::prelude::*;
//! use rand::SeedableRng;
//!
//! let flow = RealNvp::new(RealNvpSpec { dim: 4, n_layers: 2, hidden_layers: 1, width: 8, ..Default::default() }, 7);
//! let target = DoubleWell::new(4);
//! let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
//! let z = flow.base().sample(16, &mut rng);
//! let est = estimate(EstimatorId::PathQP, &flow, &target, &z, 1).unwrap();
//! assert_eq!(est.grad.len(), flow.params().len());
//! ```

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` deliberately rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autodiff;
pub mod diagnostics;
mod error;
pub mod estimators;
pub mod flow;
pub mod math;
pub mod matrix;
pub mod parallel;
pub mod sampling;
pub mod target;
pub mod training;

pub use error::{Error, Result};

pub mod prelude {
    pub use crate::autodiff::{Tape, Var};
    pub use crate::estimators::{estimate, EstimatorId, GradientEstimate};
    pub use crate::flow::{AffineFlow, BaseDensity, Flow, RealNvp, RealNvpSpec};
    pub use crate::matrix::Matrix;
    pub use crate::target::{DoubleWell, GaussianTarget, SelfTarget, Target};
    pub use crate::{Error, Result};
}
