//! Analytic diffusion models with exact noise-prediction fields.
//!
//! Under `sigma(t) = t`, a data distribution that is an isotropic Gaussian
//! mixture stays a Gaussian mixture at every noise level:
//! `p(x; t) = sum_j w_j N(x; mu_j, (s_j^2 + t^2) I)`. The field is then
//! `eps(x, t) = -t grad log p(x; t)`, available in closed form.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::GradientField;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<f64>,
}

impl GmmModel {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, stds: Vec<f64>) -> Result<Self> {
        let m = Self {
            weights,
            means,
            stds,
        };
        m.validate()?;
        Ok(m)
    }

    /// One isotropic Gaussian component.
    pub fn single(mean: Vec<f64>, std: f64) -> Self {
        Self::new(vec![1.0], vec![mean], vec![std]).expect("valid single-component model")
    }

    /// The 2D, four-mode validation model: means at `(+-4, +-4)`, std 0.5,
    /// equal weights.
    pub fn default_validation() -> Self {
        let means = vec![
            vec![4.0, 4.0],
            vec![-4.0, 4.0],
            vec![-4.0, -4.0],
            vec![4.0, -4.0],
        ];
        Self::new(vec![0.25; 4], means, vec![0.5; 4]).expect("valid default model")
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.weights.len();
        if j == 0 || self.means.len() != j || self.stds.len() != j {
            return Err(Error::InvalidModel(
                "weights, means and stds must have equal, nonzero length".into(),
            ));
        }
        let d = self.means[0].len();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(Error::InvalidModel(
                "all means must share one positive dimension".into(),
            ));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidModel("weights must be nonnegative".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidModel(format!("weights sum to {sum}, not 1")));
        }
        if self.stds.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidModel("stds must be positive".into()));
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("means must be finite".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dimension(&self) -> usize {
        self.means[0].len()
    }

    /// Per-component log of `w_j N(x; mu_j, v_j I)` and the variances `v_j`.
    fn log_joint(&self, x: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
        let d = x.len() as f64;
        let t2 = t * t;
        let vars: Vec<f64> = self.stds.iter().map(|s| s * s + t2).collect();
        let logs = self
            .means
            .iter()
            .zip(&vars)
            .zip(&self.weights)
            .map(|((mu, v), w)| {
                let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                w.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln() - 0.5 * sq / v
            })
            .collect();
        (logs, vars)
    }

    /// `log p(x; t)`, log-sum-exp stabilized.
    pub fn log_density(&self, x: &[f64], t: f64) -> f64 {
        let (logs, _) = self.log_joint(x, t);
        log_sum_exp(&logs)
    }

    /// `-t grad_x log p(x; t)` without input validation.
    fn epsilon_unchecked(&self, x: &[f64], t: f64) -> Vec<f64> {
        let (logs, vars) = self.log_joint(x, t);
        let lse = log_sum_exp(&logs);
        let mut out = vec![0.0; x.len()];
        for ((log_j, mu), v) in logs.iter().zip(&self.means).zip(&vars) {
            let resp = (log_j - lse).exp();
            if resp == 0.0 {
                continue;
            }
            let coef = resp * t / v;
            for ((o, xi), mi) in out.iter_mut().zip(x).zip(mu) {
                *o += coef * (xi - mi);
            }
        }
        out
    }

    /// The exact noise-prediction field at `(x, t)`.
    pub fn epsilon(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if x.len() != self.dimension() {
            return Err(Error::DimensionMismatch {
                expected: self.dimension(),
                got: x.len(),
            });
        }
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::NonFiniteInput(format!("time {t}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("state".into()));
        }
        Ok(self.epsilon_unchecked(x, t))
    }

    /// Draws `x_{t_max} ~ N(0, t_max^2 I)`.
    pub fn prior_sample<R: Rng + ?Sized>(&self, t_max: f64, rng: &mut R) -> Vec<f64> {
        prior_sample(self.dimension(), t_max, rng)
    }

    /// Exact draw from the data distribution (`t = 0`).
    pub fn sample_data<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut j = self.components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                j = i;
                break;
            }
        }
        self.means[j]
            .iter()
            .map(|m| m + self.stds[j] * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

impl GradientField for GmmModel {
    fn dim(&self) -> usize {
        self.dimension()
    }

    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.epsilon_unchecked(x, t)
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// I.i.d. `N(0, t_max^2)` components.
pub fn prior_sample<R: Rng + ?Sized>(dim: usize, t_max: f64, rng: &mut R) -> Vec<f64> {
    (0..dim)
        .map(|_| t_max * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Closed-form flow map of a single-Gaussian model from `t_from` to `t_to`.
pub fn exact_flow_endpoint(
    model: &GmmModel,
    x_init: &[f64],
    t_from: f64,
    t_to: f64,
) -> Result<Vec<f64>> {
    if model.components() != 1 {
        return Err(Error::UnsupportedModel(format!(
            "closed-form flow needs one component, model has {}",
            model.components()
        )));
    }
    if x_init.len() != model.dimension() {
        return Err(Error::DimensionMismatch {
            expected: model.dimension(),
            got: x_init.len(),
        });
    }
    let s2 = model.stds[0] * model.stds[0];
    let ratio = (s2 + t_to * t_to).sqrt() / (s2 + t_from * t_from).sqrt();
    Ok(model.means[0]
        .iter()
        .zip(x_init)
        .map(|(mu, x)| mu + (x - mu) * ratio)
        .collect())
}

/// Wraps a field with a synthetic per-evaluation compute cost.
///
/// Every evaluation spins for `cost_ms` of wall-clock time before returning
/// the inner field's output unchanged.
pub struct CostWrappedField<F> {
    pub inner: F,
    pub cost_ms: f64,
}

impl<F: GradientField> CostWrappedField<F> {
    pub fn new(inner: F, cost_ms: f64) -> Self {
        assert!(
            cost_ms >= 0.0 && cost_ms.is_finite(),
            "cost must be nonnegative"
        );
        Self { inner, cost_ms }
    }
}

pub fn busy_wait(duration: Duration) {
    let start = Instant::now();
    while start.elapsed() < duration {
        std::hint::spin_loop();
    }
}

impl<F: GradientField> GradientField for CostWrappedField<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        let out = self.inner.eval(x, t);
        busy_wait(Duration::from_secs_f64(self.cost_ms / 1000.0));
        out
    }
}

/// `eps(x, t) = c` everywhere.
#[derive(Debug, Clone)]
pub struct ConstantField {
    pub value: Vec<f64>,
}

impl ConstantField {
    pub fn new(value: Vec<f64>) -> Self {
        Self { value }
    }
}

impl GradientField for ConstantField {
    fn dim(&self) -> usize {
        self.value.len()
    }

    fn eval(&self, _x: &[f64], _t: f64) -> Vec<f64> {
        self.value.clone()
    }
}

/// `eps(x, t) = a t`, independent of the state.
#[derive(Debug, Clone)]
pub struct LinearTimeField {
    pub slope: Vec<f64>,
}

impl GradientField for LinearTimeField {
    fn dim(&self) -> usize {
        self.slope.len()
    }

    fn eval(&self, _x: &[f64], t: f64) -> Vec<f64> {
        self.slope.iter().map(|a| a * t).collect()
    }
}
