//! Learnable per-step parameters of the ensemble-direction step.
//!
//! Optimization works on unconstrained logits ([`RawStepParams`]); the box
//! and simplex constraints hold by construction once those are mapped to
//! intermediate times, weights, time shifts and the output scale
//! ([`MaterializedStepParams`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-width of the multiplicative band for the time scale `s` and the
/// per-branch modulation `sigma`: both live in `[0.95, 1.05]`.
pub const SCALE_HALF_WIDTH: f64 = 0.05;
const SIMPLEX_TOL: f64 = 1e-12;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// `1 + 0.1 (sigmoid(x) - 0.5)`, a factor in `[0.95, 1.05]`.
#[inline]
pub fn bounded_scale(x: f64) -> f64 {
    1.0 + 2.0 * SCALE_HALF_WIDTH * (sigmoid(x) - 0.5)
}

/// Inverse of [`bounded_scale`]; `None` outside the open band.
pub fn bounded_scale_inverse(v: f64) -> Option<f64> {
    let p = (v - 1.0) / (2.0 * SCALE_HALF_WIDTH) + 0.5;
    (p > 0.0 && p < 1.0).then(|| logit(p))
}

/// Unconstrained parameters of one step, one entry per branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawStepParams {
    pub r_logit: Vec<f64>,
    pub lambda_logit: Vec<f64>,
    pub s_logit: Vec<f64>,
    pub sigma_logit: Vec<f64>,
}

/// The interpretable per-branch factors behind a materialized step.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchFactors {
    /// Geometric interpolation ratios in `(0, 1)`.
    pub r: Vec<f64>,
    /// Time-scale factors.
    pub s: Vec<f64>,
    /// Output-modulation factors.
    pub sigma: Vec<f64>,
    pub lambda: Vec<f64>,
}

/// Intermediate times, simplex weights, time shifts and output offset of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterializedStepParams {
    pub tau: Vec<f64>,
    pub lambda: Vec<f64>,
    pub delta: Vec<f64>,
    pub o: f64,
}

impl RawStepParams {
    pub fn branches(&self) -> usize {
        self.r_logit.len()
    }

    pub const PER_BRANCH: usize = 4;

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.r_logit
            .iter()
            .chain(&self.lambda_logit)
            .chain(&self.s_logit)
            .chain(&self.sigma_logit)
            .copied()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.r_logit.len();
        if k == 0
            || self.lambda_logit.len() != k
            || self.s_logit.len() != k
            || self.sigma_logit.len() != k
        {
            return Err(Error::InvalidArity(format!(
                "branch vectors differ in length or are empty (r: {k})"
            )));
        }
        if !self.is_finite() {
            return Err(Error::InvalidParams("non-finite logit".into()));
        }
        Ok(())
    }

    pub fn factors(&self) -> BranchFactors {
        BranchFactors {
            r: self.r_logit.iter().map(|&x| sigmoid(x)).collect(),
            s: self.s_logit.iter().map(|&x| bounded_scale(x)).collect(),
            sigma: self.sigma_logit.iter().map(|&x| bounded_scale(x)).collect(),
            lambda: softmax(&self.lambda_logit),
        }
    }

    /// Maps logits onto interval `(t_next, t_cur)`.
    ///
    /// `tau = t_cur^r * t_next^(1 - r)`, `delta = (s - 1) tau`,
    /// `o = sum_k lambda_k sigma_k - 1`.
    pub fn materialize(&self, t_cur: f64, t_next: f64) -> MaterializedStepParams {
        let f = self.factors();
        let tau: Vec<f64> =
            f.r.iter()
                .map(|&r| t_cur.powf(r) * t_next.powf(1.0 - r))
                .collect();
        let delta = tau.iter().zip(&f.s).map(|(t, s)| (s - 1.0) * t).collect();
        let o = f
            .lambda
            .iter()
            .zip(&f.sigma)
            .map(|(l, s)| l * s)
            .sum::<f64>()
            - 1.0;
        MaterializedStepParams {
            tau,
            lambda: f.lambda,
            delta,
            o,
        }
    }

    /// Recovers logits from published factor values.
    pub fn from_factors(r: &[f64], s: &[f64], sigma: &[f64], lambda: &[f64]) -> Result<Self> {
        let k = r.len();
        if k == 0 || s.len() != k || sigma.len() != k || lambda.len() != k {
            return Err(Error::InvalidArity(
                "factor vectors differ in length".into(),
            ));
        }
        let r_logit = r
            .iter()
            .map(|&v| {
                (v > 0.0 && v < 1.0).then(|| logit(v)).ok_or_else(|| {
                    Error::InvariantViolation(format!("ratio r = {v} outside (0, 1)"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let band = |name: &str, vals: &[f64]| -> Result<Vec<f64>> {
            vals.iter()
                .map(|&v| {
                    bounded_scale_inverse(v).ok_or_else(|| {
                        Error::InvariantViolation(format!("{name} = {v} outside [0.95, 1.05]"))
                    })
                })
                .collect()
        };
        let s_logit = band("s", s)?;
        let sigma_logit = band("sigma", sigma)?;
        let sum: f64 = lambda.iter().sum();
        if lambda.iter().any(|l| !(*l > 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvariantViolation(format!(
                "lambda {lambda:?} is not on the simplex (sum {sum})"
            )));
        }
        let lambda_logit = lambda.iter().map(|l| l.ln()).collect();
        Ok(Self {
            r_logit,
            lambda_logit,
            s_logit,
            sigma_logit,
        })
    }
}

impl MaterializedStepParams {
    pub fn branches(&self) -> usize {
        self.tau.len()
    }

    /// The degenerate single branch at the start point: reduces the step to Euler.
    pub fn start_point(t_cur: f64) -> Self {
        Self {
            tau: vec![t_cur],
            lambda: vec![1.0],
            delta: vec![0.0],
            o: 0.0,
        }
    }

    /// Checks interval membership, simplex weights and positive shifted times.
    pub fn validate(&self, t_cur: f64, t_next: f64) -> Result<()> {
        let k = self.tau.len();
        if k == 0 || self.lambda.len() != k || self.delta.len() != k {
            return Err(Error::InvalidArity(
                "branch vectors differ in length or are empty".into(),
            ));
        }
        let (lo, hi) = (t_cur.min(t_next), t_cur.max(t_next));
        for (tau, delta) in self.tau.iter().zip(&self.delta) {
            if !(*tau >= lo && *tau <= hi) {
                return Err(Error::InvalidParams(format!(
                    "tau {tau} outside [{lo}, {hi}]"
                )));
            }
            if !(tau + delta > 0.0) {
                return Err(Error::InvalidParams(format!(
                    "shifted time {} not positive",
                    tau + delta
                )));
            }
        }
        check_simplex(&self.lambda, 1e-9)?;
        if !self.o.is_finite() {
            return Err(Error::InvalidParams("non-finite output offset".into()));
        }
        Ok(())
    }
}

pub(crate) fn check_simplex(v: &[f64], tol: f64) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if v.iter().any(|x| !(*x >= 0.0)) || !((sum - 1.0).abs() <= tol) {
        return Err(Error::InvalidSimplex { sum });
    }
    Ok(())
}

/// `true` when `v` is a simplex point to within `1e-12`.
pub fn on_simplex(v: &[f64]) -> bool {
    check_simplex(v, SIMPLEX_TOL).is_ok()
}

/// Starting point for distillation: `K` evenly spaced ratios `k / (K + 1)`,
/// equal weights, and identity time scale and modulation.
pub fn init_default(n_steps: usize, k_branches: usize) -> Result<Vec<RawStepParams>> {
    if n_steps < 1 {
        return Err(Error::InvalidArity(format!("n_steps = {n_steps}")));
    }
    if k_branches < 1 {
        return Err(Error::InvalidArity(format!("k = {k_branches}")));
    }
    let r_logit: Vec<f64> = (1..=k_branches)
        .map(|k| logit(k as f64 / (k_branches + 1) as f64))
        .collect();
    let step = RawStepParams {
        r_logit,
        lambda_logit: vec![0.0; k_branches],
        s_logit: vec![0.0; k_branches],
        sigma_logit: vec![0.0; k_branches],
    };
    Ok(vec![step; n_steps])
}

/// Concatenates per-step logits as `[r.., lambda.., s.., sigma..]` per step.
pub fn flatten(steps: &[RawStepParams]) -> Vec<f64> {
    steps
        .iter()
        .flat_map(|s| s.values().collect::<Vec<_>>())
        .collect()
}

/// Inverse of [`flatten`].
pub fn unflatten(flat: &[f64], n_steps: usize, k: usize) -> Vec<RawStepParams> {
    assert_eq!(flat.len(), n_steps * k * RawStepParams::PER_BRANCH);
    flat.chunks(k * RawStepParams::PER_BRANCH)
        .map(|c| RawStepParams {
            r_logit: c[..k].to_vec(),
            lambda_logit: c[k..2 * k].to_vec(),
            s_logit: c[2 * k..3 * k].to_vec(),
            sigma_logit: c[3 * k..].to_vec(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn interpolation_endpoints() {
        let mut p = init_default(1, 1).unwrap().remove(0);
        p.r_logit[0] = -60.0;
        let m = p.materialize(4.0, 1.0);
        assert!((m.tau[0] - 1.0).abs() < 1e-12);
        p.r_logit[0] = 60.0;
        let m = p.materialize(4.0, 1.0);
        assert!((m.tau[0] - 4.0).abs() < 1e-12);
        p.r_logit[0] = 0.0;
        let m = p.materialize(4.0, 1.0);
        assert!((m.tau[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn identity_modulation_gives_zero_offset() {
        let p = RawStepParams {
            r_logit: vec![0.3, -1.0, 2.0],
            lambda_logit: vec![0.1, 2.0, -0.4],
            s_logit: vec![0.0; 3],
            sigma_logit: vec![0.0; 3],
        };
        let f = p.factors();
        assert!(f.sigma.iter().all(|&s| s == 1.0));
        let m = p.materialize(10.0, 3.0);
        assert!(m.o.abs() < 1e-15);
        assert!(m.delta.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn default_init() {
        let steps = init_default(3, 2).unwrap();
        assert_eq!(steps.len(), 3);
        let f = steps[0].factors();
        assert!((f.r[0] - 1.0 / 3.0).abs() < 1e-15 && (f.r[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f.lambda, vec![0.5, 0.5]);
        let m = steps[0].materialize(80.0, 40.0);
        assert_eq!(m.o, 0.0);
        assert_eq!(m.delta, vec![0.0, 0.0]);

        let one = init_default(1, 1).unwrap().remove(0).materialize(9.0, 1.0);
        assert!((one.tau[0] - 3.0).abs() < 1e-14);

        assert!(matches!(init_default(0, 2), Err(Error::InvalidArity(_))));
        assert!(matches!(init_default(2, 0), Err(Error::InvalidArity(_))));
    }

    #[test]
    fn factor_inversion_round_trip() {
        let p = RawStepParams::from_factors(
            &[0.01339, 0.67921],
            &[0.96349, 0.95231],
            &[0.99731, 0.99754],
            &[0.85185, 0.14815],
        )
        .unwrap();
        let f = p.factors();
        assert!((f.r[0] - 0.01339).abs() < 1e-12);
        assert!((f.s[1] - 0.95231).abs() < 1e-12);
        assert!((f.sigma[0] - 0.99731).abs() < 1e-12);
        assert!((f.lambda[0] - 0.85185).abs() < 1e-12);
        assert!(RawStepParams::from_factors(&[0.5], &[1.2], &[1.0], &[1.0]).is_err());
        assert!(
            RawStepParams::from_factors(&[0.5, 0.5], &[1.0, 1.0], &[1.0, 1.0], &[0.5, 0.4])
                .is_err()
        );
    }

    #[test]
    fn flatten_round_trip() {
        let mut steps = init_default(3, 2).unwrap();
        steps[1].s_logit[1] = 0.77;
        steps[2].lambda_logit[0] = -1.5;
        let flat = flatten(&steps);
        assert_eq!(flat.len(), 24);
        assert_eq!(unflatten(&flat, 3, 2), steps);
    }

    fn d_sigmoid(x: f64) -> f64 {
        let s = sigmoid(x);
        s * (1.0 - s)
    }

    /// Outputs of `materialize` flattened as `[tau.., lambda.., delta.., o]`.
    fn outputs(p: &RawStepParams, t_cur: f64, t_next: f64) -> Vec<f64> {
        let m = p.materialize(t_cur, t_next);
        let mut v = m.tau.clone();
        v.extend(&m.lambda);
        v.extend(&m.delta);
        v.push(m.o);
        v
    }

    /// Hand-derived Jacobian of [`outputs`] w.r.t. the flat logits.
    fn analytic_jacobian(p: &RawStepParams, t_cur: f64, t_next: f64) -> Vec<Vec<f64>> {
        let k = p.branches();
        let f = p.factors();
        let m = p.materialize(t_cur, t_next);
        let log_ratio = (t_cur / t_next).ln();
        let n_out = 3 * k + 1;
        let mut jac = vec![vec![0.0; 4 * k]; n_out];
        for i in 0..k {
            let dtau = m.tau[i] * log_ratio * d_sigmoid(p.r_logit[i]);
            jac[i][i] = dtau;
            jac[2 * k + i][i] = (f.s[i] - 1.0) * dtau;
            let ds = 0.1 * d_sigmoid(p.s_logit[i]);
            jac[2 * k + i][2 * k + i] = ds * m.tau[i];
            for j in 0..k {
                let dl = f.lambda[i] * (if i == j { 1.0 } else { 0.0 } - f.lambda[j]);
                jac[k + i][k + j] = dl;
                jac[3 * k][k + j] += f.sigma[i] * dl;
            }
            jac[3 * k][3 * k + i] = f.lambda[i] * 0.1 * d_sigmoid(p.sigma_logit[i]);
        }
        jac
    }

    proptest! {
        #[test]
        fn materialized_constraints_hold(
            vals in prop::collection::vec(-8.0f64..8.0, 12),
            t_next in 0.002f64..10.0, span in 0.01f64..70.0,
        ) {
            let p = unflatten(&vals, 1, 3).remove(0);
            let t_cur = t_next + span;
            let m = p.materialize(t_cur, t_next);
            prop_assert!(m.validate(t_cur, t_next).is_ok());
            prop_assert!(on_simplex(&m.lambda));
            let f = p.factors();
            for (s, sg) in f.s.iter().zip(&f.sigma) {
                prop_assert!((s - 1.0).abs() <= 0.05 + 1e-12);
                prop_assert!((sg - 1.0).abs() <= 0.05 + 1e-12);
            }
            prop_assert!(m.o.abs() <= 0.05 + 1e-12);
        }

        #[test]
        fn materialize_derivatives_match_fd(
            vals in prop::collection::vec(-3.0f64..3.0, 8),
            t_next in 0.01f64..10.0, span in 0.1f64..70.0,
        ) {
            let k = 2;
            let p = unflatten(&vals, 1, k).remove(0);
            let t_cur = t_next + span;
            let jac = analytic_jacobian(&p, t_cur, t_next);
            let h = 1e-5;
            for c in 0..4 * k {
                let mut plus = vals.clone();
                let mut minus = vals.clone();
                plus[c] += h;
                minus[c] -= h;
                let op = outputs(&unflatten(&plus, 1, k)[0], t_cur, t_next);
                let om = outputs(&unflatten(&minus, 1, k)[0], t_cur, t_next);
                for (row, (a, b)) in op.iter().zip(&om).enumerate() {
                    let fd = (a - b) / (2.0 * h);
                    let an = jac[row][c];
                    let scale = an.abs().max(1e-4 * t_cur.max(1.0));
                    prop_assert!((fd - an).abs() / scale < 1e-6,
                        "row {} col {}: fd {} analytic {}", row, c, fd, an);
                }
            }
        }
    }
}
