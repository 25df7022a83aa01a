//! The targets a run can train against.

use flowpath_core::autodiff::{Tape, Var};
use flowpath_core::flow::{RealNvp, RealNvpSpec};
use flowpath_core::matrix::Matrix;
use flowpath_core::target::{DoubleWell, SelfTarget, Target};
use flowpath_core::Result;

use crate::config::{RunConfig, TargetKind};

/// What a checkpoint records about its target.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetDesc {
    DoubleWell(DoubleWell),
    /// The initial flow of the run (rebuilt from the flow spec and seed).
    SelfTarget,
}

impl TargetDesc {
    pub fn from_config(cfg: &RunConfig) -> Self {
        match cfg.target.kind {
            TargetKind::DoubleWell => TargetDesc::DoubleWell(cfg.double_well()),
            TargetKind::SelfTarget => TargetDesc::SelfTarget,
        }
    }

    pub fn build(&self, spec: RealNvpSpec, flow_seed: u64) -> RunTarget {
        match self {
            TargetDesc::DoubleWell(dw) => RunTarget::DoubleWell(*dw),
            TargetDesc::SelfTarget => RunTarget::SelfTarget(SelfTarget::new(&RealNvp::new(spec, flow_seed))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum RunTarget {
    DoubleWell(DoubleWell),
    SelfTarget(SelfTarget<RealNvp>),
}

impl Target for RunTarget {
    fn dim(&self) -> usize {
        match self {
            RunTarget::DoubleWell(t) => t.dim(),
            RunTarget::SelfTarget(t) => t.dim(),
        }
    }

    fn action_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            RunTarget::DoubleWell(t) => t.action_on(tape, x),
            RunTarget::SelfTarget(t) => t.action_on(tape, x),
        }
    }

    fn is_even(&self) -> bool {
        match self {
            RunTarget::DoubleWell(t) => t.is_even(),
            RunTarget::SelfTarget(t) => t.is_even(),
        }
    }

    fn action(&self, x: &Matrix) -> Result<Vec<f64>> {
        match self {
            RunTarget::DoubleWell(t) => t.action(x),
            RunTarget::SelfTarget(t) => t.action(x),
        }
    }

    fn action_and_grad(&self, x: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        match self {
            RunTarget::DoubleWell(t) => t.action_and_grad(x),
            RunTarget::SelfTarget(t) => t.action_and_grad(x),
        }
    }
}
