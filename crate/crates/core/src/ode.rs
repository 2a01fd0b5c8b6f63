//! Probability-flow ODE abstraction: `dx = eps(x, t) dt`.
//!
//! The sampling drivers walk a [`TimeSchedule`] from `t_N` down to `t_0`
//! and record a [`Trajectory`] with both total and parallel-round NFE
//! counters.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::schedule::TimeSchedule;
use crate::solvers::{StepContext, Stepper, MAX_HISTORY};
use crate::vector::{add_scaled, all_finite};

/// A noise-prediction field `eps(x, t)`.
///
/// Implementations must be deterministic and safe to evaluate from several
/// threads at once.
pub trait GradientField: Send + Sync {
    fn dim(&self) -> usize;

    /// Evaluates the field. `x.len()` must equal [`GradientField::dim`].
    fn eval(&self, x: &[f64], t: f64) -> Vec<f64>;
}

impl<F: GradientField + ?Sized> GradientField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        (**self).eval(x, t)
    }
}

/// States visited by a sampler, in generation order (decreasing time).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<(f64, Vec<f64>)>,
    /// Every field evaluation.
    pub nfe_total: usize,
    /// Sequential evaluation rounds when independent evaluations overlap.
    pub nfe_parallel: usize,
}

impl Trajectory {
    pub fn endpoint(&self) -> &[f64] {
        &self.states.last().expect("trajectory is never empty").1
    }

    /// State recorded at schedule index `n` (so `state_at(0)` is the endpoint).
    pub fn state_at(&self, n: usize) -> &[f64] {
        let len = self.states.len();
        &self.states[len - 1 - n].1
    }
}

/// The analytical-first-step direction `x / t`.
pub fn afs_direction(x: &[f64], t: f64) -> Vec<f64> {
    x.iter().map(|v| v / t).collect()
}

/// Runs `stepper` over every interval of `schedule`, starting at `t_N`.
///
/// With `afs` the very first step is handed `x_{t_N} / t_N` as its
/// start-point gradient and so saves one evaluation round.
pub fn integrate(
    field: &dyn GradientField,
    stepper: &dyn Stepper,
    schedule: &TimeSchedule,
    x_init: &[f64],
    afs: bool,
) -> Result<Trajectory> {
    integrate_until(field, stepper, schedule, x_init, afs, 0)
}

/// As [`integrate`] but stops at schedule index `stop`, so the last
/// recorded state is `x_{t_stop}`.
pub fn integrate_until(
    field: &dyn GradientField,
    stepper: &dyn Stepper,
    schedule: &TimeSchedule,
    x_init: &[f64],
    afs: bool,
    stop: usize,
) -> Result<Trajectory> {
    if x_init.len() != field.dim() {
        return Err(Error::DimensionMismatch {
            expected: field.dim(),
            got: x_init.len(),
        });
    }
    let n_steps = schedule.n_steps();
    let times = schedule.times();
    let mut x = x_init.to_vec();
    if stop >= n_steps {
        return Err(Error::InvalidSteps(stop));
    }
    let mut states = Vec::with_capacity(n_steps + 1 - stop);
    states.push((times[n_steps], x.clone()));
    let mut history: VecDeque<Vec<f64>> = VecDeque::with_capacity(MAX_HISTORY + 1);
    let (mut nfe_total, mut nfe_parallel) = (0, 0);

    for n in (stop..n_steps).rev() {
        let (t_cur, t_next) = schedule.interval(n);
        let afs_grad = (afs && n == n_steps - 1).then(|| afs_direction(&x, t_cur));
        let hist: Vec<&[f64]> = history.iter().map(Vec::as_slice).collect();
        let ctx = StepContext {
            x_cur: &x,
            t_cur,
            t_next,
            history: &hist,
            start_gradient: afs_grad.as_deref(),
        };
        let out = stepper.step(field, n, &ctx).map_err(|e| match e {
            Error::NonFiniteOutput => Error::NonFiniteState { step: n },
            other => other,
        })?;
        if !all_finite(&out.x_next) {
            return Err(Error::NonFiniteState { step: n });
        }
        nfe_total += out.nfe_total;
        nfe_parallel += out.nfe_parallel;
        if let Some(g) = out.gradient {
            history.push_front(g);
            history.truncate(MAX_HISTORY);
        }
        x = out.x_next;
        states.push((t_next, x.clone()));
    }
    Ok(Trajectory {
        states,
        nfe_total,
        nfe_parallel,
    })
}

fn rk4_substep(field: &dyn GradientField, x: &[f64], t: f64, dt: f64) -> Vec<f64> {
    let k1 = field.eval(x, t);
    let k2 = field.eval(&add_scaled(x, 0.5 * dt, &k1), t + 0.5 * dt);
    let k3 = field.eval(&add_scaled(x, 0.5 * dt, &k2), t + 0.5 * dt);
    let k4 = field.eval(&add_scaled(x, dt, &k3), t + dt);
    x.iter()
        .enumerate()
        .map(|(i, xi)| xi + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Classical RK4 with `substeps` uniform substeps per schedule interval.
///
/// Serves as the ground-truth oracle; states are recorded at schedule
/// times only.
pub fn reference_solve(
    field: &dyn GradientField,
    schedule: &TimeSchedule,
    x_init: &[f64],
    substeps: usize,
) -> Result<Trajectory> {
    if substeps < 1 {
        return Err(Error::InvalidSteps(substeps));
    }
    if x_init.len() != field.dim() {
        return Err(Error::DimensionMismatch {
            expected: field.dim(),
            got: x_init.len(),
        });
    }
    let n_steps = schedule.n_steps();
    let mut x = x_init.to_vec();
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push((schedule.t_max(), x.clone()));
    for n in (0..n_steps).rev() {
        let (t_cur, t_next) = schedule.interval(n);
        let dt = (t_next - t_cur) / substeps as f64;
        for j in 0..substeps {
            let t = t_cur + j as f64 * dt;
            x = rk4_substep(field, &x, t, dt);
        }
        if !all_finite(&x) {
            return Err(Error::NonFiniteState { step: n });
        }
        states.push((t_next, x.clone()));
    }
    let nfe = 4 * substeps * n_steps;
    Ok(Trajectory {
        states,
        nfe_total: nfe,
        nfe_parallel: nfe,
    })
}
