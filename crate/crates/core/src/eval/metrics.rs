use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ode::{reference_solve, GradientField, Trajectory};
use crate::schedule::{make_schedule, ScheduleKind, TimeSchedule};
use crate::vector::distance;

/// RK4 substeps per geometric piece of the oracle's refined schedule.
pub const ORACLE_SUBSTEPS: usize = 10;
/// Geometric pieces used across the whole time range by [`oracle_endpoint`].
const ORACLE_PIECES: usize = 200;

/// Ground-truth endpoint from `t_max` to `t_min`: RK4 over geometrically
/// spaced pieces, so that `dx/dt ~ x / t` is resolved at both ends.
pub fn oracle_endpoint(
    field: &dyn GradientField,
    x_init: &[f64],
    t_min: f64,
    t_max: f64,
) -> Result<Vec<f64>> {
    let s = make_schedule(ScheduleKind::Logsnr, ORACLE_PIECES, t_min, t_max, 7.0)?;
    Ok(reference_solve(field, &s, x_init, ORACLE_SUBSTEPS)?
        .endpoint()
        .to_vec())
}

pub fn oracle_endpoints(
    field: &dyn GradientField,
    noises: &[Vec<f64>],
    t_min: f64,
    t_max: f64,
) -> Result<Vec<Vec<f64>>> {
    noises
        .par_iter()
        .map(|x| oracle_endpoint(field, x, t_min, t_max))
        .collect()
}

/// Ground-truth states at every time of `schedule`. Each interval gets
/// its share of geometric pieces, at least one.
pub fn oracle_trajectory(
    field: &dyn GradientField,
    schedule: &TimeSchedule,
    x_init: &[f64],
) -> Result<Trajectory> {
    let span = (schedule.t_max() / schedule.t_min()).ln();
    let mut times = vec![schedule.t_min()];
    let mut keep = vec![0];
    for w in schedule.times().windows(2) {
        let pieces = ((ORACLE_PIECES as f64 * (w[1] / w[0]).ln() / span).ceil() as usize).max(1);
        let ratio = w[1] / w[0];
        times.extend((1..pieces).map(|j| w[0] * ratio.powf(j as f64 / pieces as f64)));
        times.push(w[1]);
        keep.push(times.len() - 1);
    }
    let fine = TimeSchedule::from_times(ScheduleKind::Custom, schedule.rho, times)?;
    let full = reference_solve(field, &fine, x_init, ORACLE_SUBSTEPS)?;
    let last = full.states.len() - 1;
    let states = keep
        .iter()
        .rev()
        .map(|&i| full.states[last - i].clone())
        .collect();
    Ok(Trajectory {
        states,
        nfe_total: full.nfe_total,
        nfe_parallel: full.nfe_parallel,
    })
}

/// Mean l2 distance between matched endpoints.
pub fn endpoint_error(runs: &[Vec<f64>], oracle: &[Vec<f64>]) -> Result<f64> {
    if runs.len() != oracle.len() || runs.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: oracle.len(),
            got: runs.len(),
        });
    }
    let total: f64 = runs.iter().zip(oracle).map(|(a, b)| distance(a, b)).sum();
    Ok(total / runs.len() as f64)
}

/// Mean l2 distance at every recorded time, in generation order.
pub fn trajectory_error(runs: &[Trajectory], oracle: &[Trajectory]) -> Result<Vec<f64>> {
    if runs.len() != oracle.len() || runs.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: oracle.len(),
            got: runs.len(),
        });
    }
    let len = oracle[0].states.len();
    let mut out = vec![0.0; len];
    for (a, b) in runs.iter().zip(oracle) {
        if a.states.len() != len || b.states.len() != len {
            return Err(Error::DimensionMismatch {
                expected: len,
                got: a.states.len(),
            });
        }
        for (o, ((_, x), (_, y))) in out.iter_mut().zip(a.states.iter().zip(&b.states)) {
            *o += distance(x, y) / runs.len() as f64;
        }
    }
    Ok(out)
}

fn mean_pairwise(a: &[Vec<f64>], b: &[Vec<f64>], same: bool) -> f64 {
    let total: f64 = a
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            b.iter()
                .enumerate()
                .filter(|(j, _)| !same || *j != i)
                .map(|(_, y)| distance(x, y))
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    let pairs = if same {
        a.len() * (a.len() - 1)
    } else {
        a.len() * b.len()
    };
    total / pairs as f64
}

/// `2 E|X - Y| - E|X - X'| - E|Y - Y'|` with unbiased within-sample terms.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidConfig(
            "energy distance needs at least two samples per side".into(),
        ));
    }
    Ok(2.0 * mean_pairwise(a, b, false) - mean_pairwise(a, a, true) - mean_pairwise(b, b, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::integrate;
    use crate::solvers::Solver;
    use crate::toy::{exact_flow_endpoint, GmmModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn oracle_matches_closed_form() {
        let g = GmmModel::single(vec![0.5, -1.0], 0.8);
        let x = [60.0, -95.0];
        let exact = exact_flow_endpoint(&g, &x, 80.0, 0.002).unwrap();
        let o = oracle_endpoint(&g, &x, 0.002, 80.0).unwrap();
        assert!(distance(&o, &exact) < 1e-9 * crate::vector::norm(&exact));
        let s = make_schedule(ScheduleKind::Uniform, 3, 0.002, 80.0, 1.0).unwrap();
        let t = oracle_trajectory(&g, &s, &x).unwrap();
        for n in 0..=3 {
            let e = exact_flow_endpoint(&g, &x, 80.0, s.times()[n]).unwrap();
            assert!(distance(t.state_at(n), &e) < 1e-8, "n = {n}");
            assert_eq!(t.states[3 - n].0, s.times()[n]);
        }
    }

    #[test]
    fn identical_runs_have_zero_error() {
        let a = vec![vec![1.0, 2.0], vec![-3.0, 0.5]];
        assert_eq!(endpoint_error(&a, &a).unwrap(), 0.0);
        assert!(endpoint_error(&a, &a[..1]).is_err());
    }

    #[test]
    fn one_euler_step_residual() {
        let g = GmmModel::single(vec![0.0], 1.0);
        let s = make_schedule(ScheduleKind::Uniform, 1, 0.002, 80.0, 1.0).unwrap();
        let x = vec![80.0];
        let run = integrate(&g, &Solver::Euler, &s, &x, false).unwrap();
        let oracle = oracle_endpoint(&g, &x, 0.002, 80.0).unwrap();
        let by_hand =
            (80.0 - 79.998 * 6400.0 / 6401.0) - 80.0 * 1.000004f64.sqrt() / 6401f64.sqrt();
        let err = endpoint_error(&[run.endpoint().to_vec()], &[oracle]).unwrap();
        assert!((err - by_hand.abs()).abs() < 1e-9);
    }

    #[test]
    fn euler_error_decreases_with_steps() {
        let g = GmmModel::default_validation();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noises: Vec<Vec<f64>> = (0..32)
            .map(|_| crate::toy::prior_sample(2, 80.0, &mut rng))
            .collect();
        let oracle = oracle_endpoints(&g, &noises, 0.002, 80.0).unwrap();
        let errs: Vec<f64> = [5, 10, 20, 40]
            .iter()
            .map(|&n| {
                let s = make_schedule(ScheduleKind::Polynomial, n, 0.002, 80.0, 7.0).unwrap();
                let runs: Vec<Vec<f64>> = noises
                    .iter()
                    .map(|x| {
                        integrate(&g, &Solver::Euler, &s, x, false)
                            .unwrap()
                            .endpoint()
                            .to_vec()
                    })
                    .collect();
                endpoint_error(&runs, &oracle).unwrap()
            })
            .collect();
        for w in errs.windows(2) {
            assert!(w[1] < w[0], "{errs:?}");
        }
    }

    #[test]
    fn energy_distance_separates_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut draw = |shift: f64| -> Vec<Vec<f64>> {
            (0..300)
                .map(|_| {
                    let a: f64 = StandardNormal.sample(&mut rng);
                    let b: f64 = StandardNormal.sample(&mut rng);
                    vec![a + shift, b]
                })
                .collect()
        };
        let (p, q, r) = (draw(0.0), draw(0.0), draw(2.0));
        let same = energy_distance(&p, &q).unwrap();
        let apart = energy_distance(&p, &r).unwrap();
        assert!(same.abs() < 0.05, "{same}");
        assert!(apart > 1.0, "{apart}");
        assert!(energy_distance(&p[..1], &q).is_err());
    }
}
