//! Ensemble-parallel-direction steps.
//!
//! One start-point evaluation seeds `K` Euler probes inside the interval;
//! the `K` probe gradients are independent and run concurrently, then get
//! combined with simplex weights and an output scale `(1 + o)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::GradientField;
use crate::params::{MaterializedStepParams, RawStepParams};
use crate::schedule::TimeSchedule;
use crate::vector::{add_scaled, all_finite, weighted_sum};

use super::ipndm::multistep_direction;
use super::{StepContext, StepOutput};

/// How the `K` branch gradients are scheduled. Results are identical either way.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BranchExecution {
    #[default]
    Parallel,
    Sequential,
}

/// Per-interval parameters for the EPD step rules, indexed by interval `n`.
#[derive(Debug, Clone)]
pub struct EpdSolver {
    pub steps: Vec<MaterializedStepParams>,
    pub execution: BranchExecution,
}

impl EpdSolver {
    pub fn new(steps: Vec<MaterializedStepParams>) -> Self {
        Self {
            steps,
            execution: BranchExecution::Parallel,
        }
    }

    /// Materializes raw logits on each interval of `schedule`.
    pub fn from_raw(raw: &[RawStepParams], schedule: &TimeSchedule) -> Result<Self> {
        if raw.len() != schedule.n_steps() {
            return Err(Error::InvalidArity(format!(
                "{} parameter sets for {} steps",
                raw.len(),
                schedule.n_steps()
            )));
        }
        let steps = raw
            .iter()
            .enumerate()
            .map(|(n, p)| {
                let (t_cur, t_next) = schedule.interval(n);
                p.materialize(t_cur, t_next)
            })
            .collect();
        Ok(Self::new(steps))
    }

    pub fn with_execution(mut self, execution: BranchExecution) -> Self {
        self.execution = execution;
        self
    }

    pub fn params(&self, n: usize) -> Result<&MaterializedStepParams> {
        self.steps
            .get(n)
            .ok_or_else(|| Error::InvalidArity(format!("no parameters for step {n}")))
    }
}

/// `(1 + o) sum_k lambda_k eps(x_k, tau_k + delta_k)` and evaluation counts.
fn ensemble_direction(
    field: &dyn GradientField,
    ctx: &StepContext,
    theta: &MaterializedStepParams,
    execution: BranchExecution,
) -> Result<(Vec<f64>, usize, usize)> {
    theta.validate(ctx.t_cur, ctx.t_next)?;
    let (d_start, start_nfe) = ctx.start(field);
    let eval_branch = |k: usize| {
        let probe = add_scaled(ctx.x_cur, theta.tau[k] - ctx.t_cur, &d_start);
        field.eval(&probe, theta.tau[k] + theta.delta[k])
    };
    let k = theta.branches();
    // Collected in index order; the reduction below never depends on completion order.
    let grads: Vec<Vec<f64>> = match execution {
        BranchExecution::Parallel if k > 1 => (0..k).into_par_iter().map(eval_branch).collect(),
        _ => (0..k).map(eval_branch).collect(),
    };
    let mut dir = weighted_sum(&theta.lambda, &grads);
    let gain = 1.0 + theta.o;
    if gain != 1.0 {
        dir.iter_mut().for_each(|v| *v *= gain);
    }
    if !all_finite(&dir) {
        return Err(Error::NonFiniteOutput);
    }
    Ok((dir, start_nfe + k, start_nfe + 1))
}

/// `x_next = x + (1 + o) h sum_k lambda_k eps(x_{tau_k}, tau_k + delta_k)`.
pub fn epd_step(
    field: &dyn GradientField,
    ctx: &StepContext,
    theta: &MaterializedStepParams,
    execution: BranchExecution,
) -> Result<StepOutput> {
    let (dir, nfe_total, nfe_parallel) = ensemble_direction(field, ctx, theta, execution)?;
    let x_next = add_scaled(ctx.x_cur, ctx.h(), &dir);
    if !all_finite(&x_next) {
        return Err(Error::NonFiniteOutput);
    }
    Ok(StepOutput {
        x_next,
        nfe_total,
        nfe_parallel,
        gradient: None,
    })
}

/// iPNDM with the current gradient replaced by the ensemble direction,
/// which is also what enters the history.
pub fn epd_plugin_ipndm_step(
    field: &dyn GradientField,
    ctx: &StepContext,
    theta: &MaterializedStepParams,
    execution: BranchExecution,
) -> Result<StepOutput> {
    let (d_epd, nfe_total, nfe_parallel) = ensemble_direction(field, ctx, theta, execution)?;
    let dir = multistep_direction(&d_epd, ctx.history);
    let x_next = add_scaled(ctx.x_cur, ctx.h(), &dir);
    if !all_finite(&x_next) {
        return Err(Error::NonFiniteOutput);
    }
    Ok(StepOutput {
        x_next,
        nfe_total,
        nfe_parallel,
        gradient: Some(d_epd),
    })
}
