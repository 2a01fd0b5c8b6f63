use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ode::{integrate, GradientField};
use crate::schedule::{make_schedule, ScheduleKind, TimeSchedule, DEFAULT_RHO};
use crate::solvers::{Solver, SolverKind};

use super::metrics::endpoint_error;

/// A solver bound to its schedule, ready to be scored.
#[derive(Debug, Clone)]
pub struct Contender {
    pub name: String,
    pub solver: Solver,
    pub schedule: TimeSchedule,
    pub afs: bool,
}

/// Schedule each baseline is usually paired with.
pub fn default_schedule_kind(kind: SolverKind) -> ScheduleKind {
    match kind {
        SolverKind::Dpm2 => ScheduleKind::Logsnr,
        SolverKind::Epd | SolverKind::EpdPlugin => ScheduleKind::Uniform,
        _ => ScheduleKind::Polynomial,
    }
}

/// Parameter-free baseline at `para_nfe` sequential rounds; `None` when
/// the budget is not reachable by that solver.
pub fn baseline_contender(
    kind: SolverKind,
    para_nfe: usize,
    afs: bool,
    t_min: f64,
    t_max: f64,
) -> Result<Option<Contender>> {
    let solver = match kind {
        SolverKind::Euler => Solver::Euler,
        SolverKind::Heun => Solver::Heun,
        SolverKind::Dpm2 => Solver::Dpm2,
        SolverKind::Ipndm => Solver::Ipndm,
        other => {
            return Err(Error::InvalidConfig(format!(
                "{} needs parameters",
                other.name()
            )))
        }
    };
    let Some(n) = kind.steps_for_parallel_nfe(para_nfe, afs) else {
        return Ok(None);
    };
    let schedule = make_schedule(default_schedule_kind(kind), n, t_min, t_max, DEFAULT_RHO)?;
    Ok(Some(Contender {
        name: kind.name().to_string(),
        solver,
        schedule,
        afs,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub name: String,
    pub schedule: ScheduleKind,
    pub n_steps: usize,
    pub nfe_total: usize,
    pub nfe_parallel: usize,
    pub endpoint_error: f64,
    pub wall_seconds: f64,
}

/// Scores every contender on `noises` against matching `oracle` endpoints.
pub fn compare_solvers(
    field: &dyn GradientField,
    contenders: &[Contender],
    noises: &[Vec<f64>],
    oracle: &[Vec<f64>],
) -> Result<Vec<CompareRow>> {
    contenders
        .iter()
        .map(|c| {
            let start = Instant::now();
            let runs: Vec<_> = noises
                .par_iter()
                .map(|x| integrate(field, &c.solver, &c.schedule, x, c.afs))
                .collect::<Result<_>>()?;
            let wall_seconds = start.elapsed().as_secs_f64();
            let ends: Vec<Vec<f64>> = runs.iter().map(|r| r.endpoint().to_vec()).collect();
            Ok(CompareRow {
                name: c.name.clone(),
                schedule: c.schedule.kind,
                n_steps: c.schedule.n_steps(),
                nfe_total: runs[0].nfe_total,
                nfe_parallel: runs[0].nfe_parallel,
                endpoint_error: endpoint_error(&ends, oracle)?,
                wall_seconds,
            })
        })
        .collect()
}

pub fn rows_to_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from(
        "solver,schedule,n_steps,nfe_total,nfe_parallel,endpoint_error,wall_seconds\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.name,
            r.schedule,
            r.n_steps,
            r.nfe_total,
            r.nfe_parallel,
            r.endpoint_error,
            r.wall_seconds
        ));
    }
    out
}
