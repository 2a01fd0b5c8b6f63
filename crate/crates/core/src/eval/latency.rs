use std::time::Instant;

use crate::error::{Error, Result};
use crate::ode::{integrate, GradientField};
use crate::params::init_default;
use crate::schedule::TimeSchedule;
use crate::solvers::{BranchExecution, EpdSolver, Solver};

/// Wall-clock statistics of full sampling runs, in milliseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyStats {
    pub reps: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Normal-approximation 95% interval for the mean; absent for one rep.
    pub ci95_ms: Option<(f64, f64)>,
}

impl LatencyStats {
    pub fn from_samples(ms: &[f64]) -> Self {
        let n = ms.len() as f64;
        let mean = ms.iter().sum::<f64>() / n;
        if ms.len() < 2 {
            return Self {
                reps: ms.len(),
                mean_ms: mean,
                std_ms: 0.0,
                ci95_ms: None,
            };
        }
        let var = ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let half = 1.96 * (var / n).sqrt();
        Self {
            reps: ms.len(),
            mean_ms: mean,
            std_ms: var.sqrt(),
            ci95_ms: Some((mean - half, mean + half)),
        }
    }
}

/// Times `reps` runs of `solver` after `warmup` discarded ones, inside a
/// dedicated pool of `threads` workers.
#[allow(clippy::too_many_arguments)]
pub fn latency_bench(
    field: &dyn GradientField,
    solver: &Solver,
    schedule: &TimeSchedule,
    x_init: &[f64],
    afs: bool,
    warmup: usize,
    reps: usize,
    threads: usize,
) -> Result<LatencyStats> {
    if reps == 0 {
        return Err(Error::InvalidConfig(
            "latency bench needs at least one repetition".into(),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| {
        for _ in 0..warmup {
            integrate(field, solver, schedule, x_init, afs)?;
        }
        let mut ms = Vec::with_capacity(reps);
        for _ in 0..reps {
            let start = Instant::now();
            integrate(field, solver, schedule, x_init, afs)?;
            ms.push(start.elapsed().as_secs_f64() * 1e3);
        }
        Ok(LatencyStats::from_samples(&ms))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchLatency {
    pub k: usize,
    pub stats: LatencyStats,
}

/// EPD latency at the default parameters for each branch count in `ks`,
/// with branches evaluated in parallel.
#[allow(clippy::too_many_arguments)]
pub fn bench_branch_counts(
    field: &dyn GradientField,
    schedule: &TimeSchedule,
    x_init: &[f64],
    ks: &[usize],
    afs: bool,
    warmup: usize,
    reps: usize,
    threads: usize,
) -> Result<Vec<BranchLatency>> {
    ks.iter()
        .map(|&k| {
            let raw = init_default(schedule.n_steps(), k)?;
            let solver = Solver::Epd(
                EpdSolver::from_raw(&raw, schedule)?.with_execution(BranchExecution::Parallel),
            );
            let stats =
                latency_bench(field, &solver, schedule, x_init, afs, warmup, reps, threads)?;
            Ok(BranchLatency { k, stats })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_schedule, ScheduleKind};
    use crate::toy::{CostWrappedField, GmmModel};

    #[test]
    fn single_rep_has_no_interval() {
        let s = LatencyStats::from_samples(&[12.0]);
        assert_eq!(s.ci95_ms, None);
        let s = LatencyStats::from_samples(&[10.0, 12.0]);
        let (lo, hi) = s.ci95_ms.unwrap();
        assert!(lo < 11.0 && hi > 11.0);
    }

    #[test]
    fn cost_bound_run_tracks_round_count() {
        let field = CostWrappedField::new(GmmModel::default_validation(), 2.0);
        let s = make_schedule(ScheduleKind::Uniform, 5, 0.002, 80.0, 1.0).unwrap();
        let r = bench_branch_counts(&field, &s, &[3.0, -7.0], &[1], false, 1, 3, 1).unwrap();
        // Two rounds per step, five steps, 2 ms each.
        assert!(
            r[0].stats.mean_ms >= 20.0 && r[0].stats.mean_ms < 40.0,
            "{:?}",
            r[0].stats
        );
    }

    #[test]
    fn latency_ignores_trajectory_content() {
        let field = CostWrappedField::new(GmmModel::default_validation(), 2.0);
        let s = make_schedule(ScheduleKind::Uniform, 3, 0.002, 80.0, 1.0).unwrap();
        let a = latency_bench(&field, &Solver::Heun, &s, &[0.0, 0.0], false, 1, 5, 1).unwrap();
        let b = latency_bench(&field, &Solver::Heun, &s, &[150.0, -90.0], false, 1, 5, 1).unwrap();
        assert!((a.mean_ms / b.mean_ms - 1.0).abs() < 0.1, "{a:?} {b:?}");
    }

    #[test]
    fn zero_reps_rejected() {
        let g = GmmModel::default_validation();
        let s = make_schedule(ScheduleKind::Uniform, 1, 0.002, 80.0, 1.0).unwrap();
        assert!(latency_bench(&g, &Solver::Euler, &s, &[1.0, 1.0], false, 0, 0, 1).is_err());
    }
}
