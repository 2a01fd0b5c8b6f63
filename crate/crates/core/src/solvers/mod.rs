//! Step rules for the probability-flow ODE.
//!
//! Every rule advances one interval from `t_cur = t_{n+1}` to
//! `t_next = t_n` with the signed step `h = t_next - t_cur` (negative in
//! generation).

mod epd;
mod ipndm;
mod single;

use serde::{Deserialize, Serialize};

pub use epd::{epd_plugin_ipndm_step, epd_step, BranchExecution, EpdSolver};
pub use ipndm::{ipndm_coefficients, ipndm_step};
pub use single::{afs_first_step, dpm2_step, euler_step, heun_step};

use crate::error::{Error, Result};
use crate::ode::GradientField;
use crate::vector::all_finite;

/// Length of the iPNDM gradient history.
pub const MAX_HISTORY: usize = 3;

/// Inputs for one step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub x_cur: &'a [f64],
    pub t_cur: f64,
    pub t_next: f64,
    /// Past gradients, most recent first (multistep rules only).
    pub history: &'a [&'a [f64]],
    /// Precomputed start-point gradient; skips that evaluation (AFS).
    pub start_gradient: Option<&'a [f64]>,
}

impl StepContext<'_> {
    pub fn new(x_cur: &[f64], t_cur: f64, t_next: f64) -> StepContext<'_> {
        StepContext {
            x_cur,
            t_cur,
            t_next,
            history: &[],
            start_gradient: None,
        }
    }

    pub fn h(&self) -> f64 {
        self.t_next - self.t_cur
    }

    /// Start-point gradient, evaluated only when no override is supplied.
    /// Returns the gradient and the number of evaluations spent (0 or 1).
    pub(crate) fn start(&self, field: &dyn GradientField) -> (Vec<f64>, usize) {
        match self.start_gradient {
            Some(g) => (g.to_vec(), 0),
            None => (field.eval(self.x_cur, self.t_cur), 1),
        }
    }
}

/// Result of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub x_next: Vec<f64>,
    pub nfe_total: usize,
    pub nfe_parallel: usize,
    /// Gradient to push onto the multistep history, if the rule keeps one.
    pub gradient: Option<Vec<f64>>,
}

impl StepOutput {
    pub(crate) fn sequential(x_next: Vec<f64>, nfe: usize) -> Result<Self> {
        if !all_finite(&x_next) {
            return Err(Error::NonFiniteOutput);
        }
        Ok(Self {
            x_next,
            nfe_total: nfe,
            nfe_parallel: nfe,
            gradient: None,
        })
    }
}

/// A step rule usable by [`crate::ode::integrate`]. `n` is the interval
/// index, so parameterized rules can look up per-step values.
pub trait Stepper: Sync {
    fn step(&self, field: &dyn GradientField, n: usize, ctx: &StepContext) -> Result<StepOutput>;
}

/// Solver families by name, as used in configuration and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    Euler,
    Heun,
    Dpm2,
    Ipndm,
    Epd,
    EpdPlugin,
}

impl SolverKind {
    /// Sequential evaluation rounds per step when no start gradient is supplied.
    pub fn rounds_per_step(self) -> usize {
        match self {
            Self::Euler | Self::Ipndm => 1,
            Self::Heun | Self::Dpm2 | Self::Epd | Self::EpdPlugin => 2,
        }
    }

    /// Step count hitting `para_nfe` sequential rounds, if one exists.
    pub fn steps_for_parallel_nfe(self, para_nfe: usize, afs: bool) -> Option<usize> {
        let rounds = para_nfe + usize::from(afs);
        let per = self.rounds_per_step();
        (rounds.is_multiple_of(per) && rounds >= per).then_some(rounds / per)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Euler => "euler",
            Self::Heun => "heun",
            Self::Dpm2 => "dpm2",
            Self::Ipndm => "ipndm",
            Self::Epd => "epd",
            Self::EpdPlugin => "epd-plugin",
        }
    }
}

impl std::str::FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "euler" | "ddim" => Self::Euler,
            "heun" | "edm" => Self::Heun,
            "dpm2" => Self::Dpm2,
            "ipndm" => Self::Ipndm,
            "epd" => Self::Epd,
            "epd-plugin" => Self::EpdPlugin,
            other => return Err(Error::InvalidConfig(format!("unknown solver {other:?}"))),
        })
    }
}

/// Any of the built-in step rules.
#[derive(Debug, Clone)]
pub enum Solver {
    Euler,
    Heun,
    Dpm2,
    Ipndm,
    Epd(EpdSolver),
    EpdPlugin(EpdSolver),
}

impl Solver {
    pub fn kind(&self) -> SolverKind {
        match self {
            Self::Euler => SolverKind::Euler,
            Self::Heun => SolverKind::Heun,
            Self::Dpm2 => SolverKind::Dpm2,
            Self::Ipndm => SolverKind::Ipndm,
            Self::Epd(_) => SolverKind::Epd,
            Self::EpdPlugin(_) => SolverKind::EpdPlugin,
        }
    }
}

impl Stepper for Solver {
    fn step(&self, field: &dyn GradientField, n: usize, ctx: &StepContext) -> Result<StepOutput> {
        match self {
            Self::Euler => euler_step(field, ctx),
            Self::Heun => heun_step(field, ctx),
            Self::Dpm2 => dpm2_step(field, ctx),
            Self::Ipndm => ipndm_step(field, ctx),
            Self::Epd(s) => epd_step(field, ctx, s.params(n)?, s.execution),
            Self::EpdPlugin(s) => epd_plugin_ipndm_step(field, ctx, s.params(n)?, s.execution),
        }
    }
}
