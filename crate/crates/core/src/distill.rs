//! Stage-1 distillation: fit the per-step parameters so that student
//! states match a finer teacher's states at every student time.
//!
//! Gradients come from central finite differences over the logits; the
//! parameter vector is tiny, so this stays cheap and framework-free.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::ode::{integrate, integrate_until, reference_solve, GradientField, Trajectory};
use crate::optim::Adam;
use crate::params::{flatten, init_default, unflatten, RawStepParams};
use crate::schedule::{ScheduleKind, TimeSchedule};
use crate::solvers::{BranchExecution, EpdSolver, Solver, SolverKind};
use crate::toy::prior_sample;
use crate::vector::squared_distance;

/// Default central-difference step on logits.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherSolver {
    Dpm2,
    Heun,
    Ipndm,
    /// One classical RK4 step per teacher interval.
    Rk4,
}

impl std::str::FromStr for TeacherSolver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "dpm2" => Self::Dpm2,
            "heun" => Self::Heun,
            "ipndm" => Self::Ipndm,
            "rk4" | "rk4-oracle" => Self::Rk4,
            other => return Err(Error::InvalidConfig(format!("unknown teacher {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub solver: TeacherSolver,
    /// Intermediate times inserted into every student interval.
    pub m_intermediate: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            solver: TeacherSolver::Dpm2,
            m_intermediate: 6,
        }
    }
}

/// Inserts `m` geometrically spaced times inside every student interval.
/// Student times are carried over verbatim.
pub fn build_teacher_schedule(stu: &TimeSchedule, m: usize) -> TimeSchedule {
    if m == 0 {
        return stu.clone();
    }
    let times = stu.times();
    let mut out = Vec::with_capacity(stu.n_steps() * (m + 1) + 1);
    for w in times.windows(2) {
        out.push(w[0]);
        let ratio = w[1] / w[0];
        out.extend((1..=m).map(|j| w[0] * ratio.powf(j as f64 / (m + 1) as f64)));
    }
    out.push(*times.last().expect("schedule has times"));
    TimeSchedule::from_times(ScheduleKind::Custom, stu.rho, out)
        .expect("refinement keeps times increasing")
}

/// Runs the teacher over the refined schedule and keeps the states at the
/// student times.
pub fn teacher_trajectory(
    field: &dyn GradientField,
    cfg: &TeacherConfig,
    stu: &TimeSchedule,
    x_init: &[f64],
) -> Result<Trajectory> {
    let fine = build_teacher_schedule(stu, cfg.m_intermediate);
    let full = match cfg.solver {
        TeacherSolver::Dpm2 => integrate(field, &Solver::Dpm2, &fine, x_init, false)?,
        TeacherSolver::Heun => integrate(field, &Solver::Heun, &fine, x_init, false)?,
        TeacherSolver::Ipndm => integrate(field, &Solver::Ipndm, &fine, x_init, false)?,
        TeacherSolver::Rk4 => reference_solve(field, &fine, x_init, 1)?,
    };
    let stride = cfg.m_intermediate + 1;
    let states = full.states.into_iter().step_by(stride).collect();
    Ok(Trajectory {
        states,
        nfe_total: full.nfe_total,
        nfe_parallel: full.nfe_parallel,
    })
}

/// Squared Euclidean distance at every student time.
pub fn distill_loss(student: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<Vec<f64>> {
    if student.len() != reference.len() {
        return Err(Error::DimensionMismatch {
            expected: reference.len(),
            got: student.len(),
        });
    }
    student
        .iter()
        .zip(reference)
        .map(|(x, y)| {
            if x.len() != y.len() {
                return Err(Error::DimensionMismatch {
                    expected: y.len(),
                    got: x.len(),
                });
            }
            Ok(squared_distance(x, y))
        })
        .collect()
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` for every coordinate.
pub fn estimate_gradient<F>(loss: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    estimate_gradient_masked(loss, params, h, &vec![true; params.len()])
}

/// As [`estimate_gradient`], leaving masked-out coordinates at zero.
pub fn estimate_gradient_masked<F>(
    loss: F,
    params: &[f64],
    h: f64,
    mask: &[bool],
) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    assert_eq!(mask.len(), params.len());
    let grad: Vec<f64> = (0..params.len())
        .into_par_iter()
        .map(|i| {
            if !mask[i] {
                return 0.0;
            }
            let mut p = params.to_vec();
            p[i] = params[i] + h;
            let up = loss(&p);
            p[i] = params[i] - h;
            let down = loss(&p);
            (up - down) / (2.0 * h)
        })
        .collect();
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss);
    }
    Ok(grad)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig {
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Number of cached initial noises (with their teacher states).
    pub pool_size: usize,
    pub fd_step: f64,
    pub afs: bool,
    pub variant: SolverKind,
    pub teacher: TeacherConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            k: 2,
            epochs: 200,
            batch_size: 64,
            lr: 0.01,
            pool_size: 2048,
            fd_step: DEFAULT_FD_STEP,
            afs: true,
            variant: SolverKind::Epd,
            teacher: TeacherConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if self.batch_size < 1 || self.pool_size < 1 {
            return Err(Error::InvalidConfig(
                "batch and pool sizes must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.fd_step > 0.0) {
            return Err(Error::InvalidConfig(
                "lr and fd_step must be positive".into(),
            ));
        }
        if !matches!(self.variant, SolverKind::Epd | SolverKind::EpdPlugin) {
            return Err(Error::InvalidConfig(format!(
                "cannot distill {}",
                self.variant.name()
            )));
        }
        Ok(())
    }
}

/// Pool-averaged losses after one epoch (epoch 0 is the initialization).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// `L_n` for `n = 0..N`.
    pub per_step: Vec<f64>,
    pub wall_seconds: f64,
}

impl EpochLoss {
    pub fn mean(&self) -> f64 {
        self.per_step.iter().sum::<f64>() / self.per_step.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct DistillRun {
    pub theta: Vec<RawStepParams>,
    pub optimizer: Adam,
    pub loss_history: Vec<EpochLoss>,
}

impl DistillRun {
    pub fn to_csv(&self) -> String {
        let n_steps = self.theta.len();
        let mut out = String::from("epoch");
        for n in 0..n_steps {
            write!(out, ",loss_n{n}").unwrap();
        }
        out.push_str(",mean_loss,wall_seconds\n");
        for e in &self.loss_history {
            write!(out, "{}", e.epoch).unwrap();
            for l in &e.per_step {
                write!(out, ",{l:e}").unwrap();
            }
            writeln!(out, ",{:e},{:.3}", e.mean(), e.wall_seconds).unwrap();
        }
        out
    }

    pub fn checkpoint(&self, schedule: &TimeSchedule, cfg: &DistillConfig) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(schedule.clone(), self.theta.clone())?;
        c.afs = cfg.afs;
        c.variant = cfg.variant;
        Ok(c)
    }
}

/// Student sampler for flattened logits; branches run sequentially since
/// callers already parallelize over batch items and coordinates.
pub fn student_solver(
    flat: &[f64],
    schedule: &TimeSchedule,
    k: usize,
    variant: SolverKind,
) -> Result<Solver> {
    let raw = unflatten(flat, schedule.n_steps(), k);
    let epd = EpdSolver::from_raw(&raw, schedule)?.with_execution(BranchExecution::Sequential);
    Ok(match variant {
        SolverKind::EpdPlugin => Solver::EpdPlugin(epd),
        _ => Solver::Epd(epd),
    })
}

struct Task<'a> {
    field: &'a dyn GradientField,
    schedule: &'a TimeSchedule,
    cfg: &'a DistillConfig,
    noises: &'a [Vec<f64>],
    /// Teacher states per noise, indexed by student time.
    targets: &'a [Vec<Vec<f64>>],
}

impl Task<'_> {
    /// Batch-mean `L_n`; NaN when the student diverges.
    fn step_loss(&self, flat: &[f64], n: usize, batch: &[usize]) -> f64 {
        let Ok(solver) = student_solver(flat, self.schedule, self.cfg.k, self.cfg.variant) else {
            return f64::NAN;
        };
        let per_item: Vec<f64> = batch
            .par_iter()
            .map(|&i| {
                match integrate_until(
                    self.field,
                    &solver,
                    self.schedule,
                    &self.noises[i],
                    self.cfg.afs,
                    n,
                ) {
                    Ok(t) => squared_distance(t.endpoint(), &self.targets[i][n]),
                    Err(_) => f64::NAN,
                }
            })
            .collect();
        per_item.iter().sum::<f64>() / batch.len() as f64
    }

    /// Every `L_n` averaged over all cached noises.
    fn pool_losses(&self, flat: &[f64]) -> Result<Vec<f64>> {
        let solver = student_solver(flat, self.schedule, self.cfg.k, self.cfg.variant)?;
        let n_steps = self.schedule.n_steps();
        let per_item = (0..self.noises.len())
            .into_par_iter()
            .map(|i| {
                let t = integrate(
                    self.field,
                    &solver,
                    self.schedule,
                    &self.noises[i],
                    self.cfg.afs,
                )?;
                let states: Vec<Vec<f64>> = (0..n_steps).map(|n| t.state_at(n).to_vec()).collect();
                distill_loss(&states, &self.targets[i][..n_steps])
            })
            .collect::<Result<Vec<_>>>()?;
        let mut mean = vec![0.0; n_steps];
        for losses in &per_item {
            for (m, l) in mean.iter_mut().zip(losses) {
                *m += l / per_item.len() as f64;
            }
        }
        Ok(mean)
    }
}

/// Algorithm: for every batch, walk `n` from `N - 1` down to `0` and take
/// one Adam step on the parameters of intervals `n..N`, the only ones that
/// reach `x_{t_n}`.
pub fn train_distill<R: Rng + ?Sized>(
    field: &dyn GradientField,
    stu: &TimeSchedule,
    cfg: &DistillConfig,
    rng: &mut R,
) -> Result<DistillRun> {
    cfg.validate()?;
    let n_steps = stu.n_steps();
    let dim = field.dim();
    let noises: Vec<Vec<f64>> = (0..cfg.pool_size)
        .map(|_| prior_sample(dim, stu.t_max(), rng))
        .collect();
    let targets = noises
        .par_iter()
        .map(|x| {
            let t = teacher_trajectory(field, &cfg.teacher, stu, x)?;
            Ok((0..=n_steps).map(|n| t.state_at(n).to_vec()).collect())
        })
        .collect::<Result<Vec<Vec<Vec<f64>>>>>()?;
    let task = Task {
        field,
        schedule: stu,
        cfg,
        noises: &noises,
        targets: &targets,
    };

    let mut flat = flatten(&init_default(n_steps, cfg.k)?);
    let per_step = cfg.k * RawStepParams::PER_BRANCH;
    let mut opt = Adam::new(flat.len(), cfg.lr);
    let masks: Vec<Vec<bool>> = (0..n_steps)
        .map(|n| (0..flat.len()).map(|i| i >= n * per_step).collect())
        .collect();

    let start = Instant::now();
    let check = |losses: &[f64], epoch: usize| {
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite pool loss after epoch {epoch}"
            )));
        }
        Ok(())
    };
    let initial = task.pool_losses(&flat)?;
    check(&initial, 0)?;
    let mut history = vec![EpochLoss {
        epoch: 0,
        per_step: initial,
        wall_seconds: 0.0,
    }];

    let mut order: Vec<usize> = (0..cfg.pool_size).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            for n in (0..n_steps).rev() {
                let grad = estimate_gradient_masked(
                    |p| task.step_loss(p, n, batch),
                    &flat,
                    cfg.fd_step,
                    &masks[n],
                )
                .map_err(|_| {
                    Error::Divergence(format!("non-finite loss at step {n} in epoch {epoch}"))
                })?;
                opt.step_masked(&mut flat, &grad, &masks[n]);
            }
        }
        let losses = task
            .pool_losses(&flat)
            .map_err(|e| Error::Divergence(format!("epoch {epoch}: {e}")))?;
        check(&losses, epoch)?;
        log::debug!("epoch {epoch}: losses {losses:?}");
        history.push(EpochLoss {
            epoch,
            per_step: losses,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(DistillRun {
        theta: unflatten(&flat, n_steps, cfg.k),
        optimizer: opt,
        loss_history: history,
    })
}
