use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::ode::Trajectory;
use crate::vector::{dot, norm};

/// Residual variance below `(REL_TOL * scale)^2` counts as a straight line.
const REL_TOL: f64 = 1e-10;

/// Batch-averaged cumulative explained-variance curve of chord residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaReport {
    /// Entry `i` is the fraction explained by the first `i + 1` components.
    pub cumulative: Vec<f64>,
    pub trajectories: usize,
    /// Trajectories whose residuals vanished; they contribute all ones.
    pub degenerate: usize,
}

impl PcaReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,cumulative_explained_variance\n");
        for (i, c) in self.cumulative.iter().enumerate() {
            out.push_str(&format!("{},{c}\n", i + 1));
        }
        out
    }
}

/// Cumulative explained variance of one trajectory's residuals after the
/// chord from the first to the last state is projected out. `None` when
/// the residuals vanish.
pub fn pca_trajectory(states: &[Vec<f64>]) -> Result<Option<Vec<f64>>> {
    if states.len() < 2 {
        return Err(Error::InvalidConfig("PCA needs at least two states".into()));
    }
    let d = states[0].len();
    if let Some(bad) = states.iter().find(|s| s.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    let origin = &states[0];
    let chord: Vec<f64> = states[states.len() - 1]
        .iter()
        .zip(origin)
        .map(|(a, b)| a - b)
        .collect();
    let chord_len = norm(&chord);
    let unit: Vec<f64> = if chord_len > 0.0 {
        chord.iter().map(|c| c / chord_len).collect()
    } else {
        vec![0.0; d]
    };

    let residuals: Vec<Vec<f64>> = states
        .iter()
        .map(|s| {
            let rel: Vec<f64> = s.iter().zip(origin).map(|(a, b)| a - b).collect();
            let p = dot(&rel, &unit);
            rel.iter().zip(&unit).map(|(r, u)| r - p * u).collect()
        })
        .collect();
    let m = residuals.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|j| residuals.iter().map(|r| r[j]).sum::<f64>() / m)
        .collect();
    let cov = DMatrix::from_fn(d, d, |i, j| {
        residuals
            .iter()
            .map(|r| (r[i] - mean[i]) * (r[j] - mean[j]))
            .sum::<f64>()
            / m
    });
    let total = cov.trace();
    let scale = states.iter().map(|s| norm(s)).fold(chord_len, f64::max);
    if total <= (REL_TOL * scale).powi(2) {
        return Ok(None);
    }
    let mut eig: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let sum: f64 = eig.iter().sum();
    let mut acc = 0.0;
    let mut curve: Vec<f64> = eig
        .iter()
        .map(|v| {
            acc += v;
            (acc / sum).min(1.0)
        })
        .collect();
    *curve.last_mut().expect("d >= 1") = 1.0;
    Ok(Some(curve))
}

/// Averages [`pca_trajectory`] over a batch; degenerate members count as
/// fully explained by the first component.
pub fn pca_residual_analysis(trajectories: &[Trajectory]) -> Result<PcaReport> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::InvalidConfig("empty trajectory batch".into()))?;
    let d = first.endpoint().len();
    let mut sum = vec![0.0; d];
    let mut degenerate = 0;
    for t in trajectories {
        let states: Vec<Vec<f64>> = t.states.iter().map(|(_, x)| x.clone()).collect();
        match pca_trajectory(&states)? {
            Some(curve) => sum.iter_mut().zip(&curve).for_each(|(s, c)| *s += c),
            None => {
                degenerate += 1;
                sum.iter_mut().for_each(|s| *s += 1.0);
            }
        }
    }
    let n = trajectories.len() as f64;
    Ok(PcaReport {
        cumulative: sum.iter().map(|s| s / n).collect(),
        trajectories: trajectories.len(),
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::integrate;
    use crate::schedule::{make_schedule, ScheduleKind};
    use crate::solvers::Solver;
    use crate::toy::{prior_sample, GmmModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn embed(a: f64, b: f64, c: f64) -> Vec<f64> {
        // Orthonormal-ish directions in d = 10, plus an offset.
        let u = [1.0, 0.0, 2.0, 0.0, -1.0, 0.0, 0.5, 0.0, 0.0, 1.0];
        let v = [0.0, 1.0, 0.0, -1.0, 0.0, 3.0, 0.0, 0.5, 1.0, 0.0];
        let w = [0.3, 0.2, -0.1, 0.4, 0.1, -0.2, 0.0, 0.7, -0.5, 0.1];
        (0..10)
            .map(|i| 5.0 + a * u[i] + b * v[i] + c * w[i])
            .collect()
    }

    #[test]
    fn planar_arc_lives_in_two_components() {
        let states: Vec<Vec<f64>> = (0..=20)
            .map(|i| {
                let th = 2.5 * i as f64 / 20.0;
                embed(3.0 * th.cos(), 2.0 * th.sin(), 0.0)
            })
            .collect();
        let curve = pca_trajectory(&states).unwrap().unwrap();
        assert_eq!(curve.len(), 10);
        assert!((curve[1] - 1.0).abs() < 1e-10, "{curve:?}");
    }

    #[test]
    fn curve_in_four_dimensions_needs_a_third_component() {
        let states: Vec<Vec<f64>> = (0..=40)
            .map(|i| {
                let th = 3.0 * i as f64 / 40.0;
                let mut x = vec![0.0; 10];
                x[..4].copy_from_slice(&[th.cos(), th.sin(), (2.0 * th).cos(), (2.0 * th).sin()]);
                x
            })
            .collect();
        let curve = pca_trajectory(&states).unwrap().unwrap();
        assert!(curve[1] < 1.0 - 1e-3, "{curve:?}");
        assert!((curve[2] - 1.0).abs() < 1e-10, "{curve:?}");
    }

    #[test]
    fn straight_line_is_degenerate() {
        let states: Vec<Vec<f64>> = (0..=10)
            .map(|i| embed(0.7 * i as f64, -0.2 * i as f64, 0.0))
            .collect();
        assert_eq!(pca_trajectory(&states).unwrap(), None);
        let traj = Trajectory {
            states: states.into_iter().map(|s| (1.0, s)).collect(),
            nfe_total: 0,
            nfe_parallel: 0,
        };
        let report = pca_residual_analysis(&[traj]).unwrap();
        assert_eq!(report.degenerate, 1);
        assert!(report.cumulative.iter().all(|&c| c == 1.0));
    }

    #[test]
    fn gmm_curve_is_monotone_and_ends_at_one() {
        let g = GmmModel::default_validation();
        let s = make_schedule(ScheduleKind::Polynomial, 30, 0.002, 80.0, 7.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trajs: Vec<Trajectory> = (0..16)
            .map(|_| {
                integrate(
                    &g,
                    &Solver::Heun,
                    &s,
                    &prior_sample(2, 80.0, &mut rng),
                    false,
                )
                .unwrap()
            })
            .collect();
        let r = pca_residual_analysis(&trajs).unwrap();
        for w in r.cumulative.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert!(r.cumulative.iter().all(|c| (0.0..=1.0).contains(c)));
        assert!((r.cumulative.last().unwrap() - 1.0).abs() < 1e-12);
        assert!(r.to_csv().starts_with("component,"));
    }
}
