//! Dirichlet distributions over solver segments and mixture weights.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::check_simplex;
use crate::special::{digamma_unchecked, ln_gamma_unchecked, trigamma_unchecked};

/// Default peak sharpness of the base policy around the distilled solver.
pub const DEFAULT_KAPPA: f64 = 20.0;
/// Floor applied to concentrations before taking the mode at inference.
pub const MODE_FLOOR: f64 = 1.0 + 1e-3;
const SUPPORT_TOL: f64 = 1e-9;

/// Concentration vector of a Dirichlet distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DirichletParams {
    alpha: Vec<f64>,
}

impl TryFrom<Vec<f64>> for DirichletParams {
    type Error = Error;

    fn try_from(alpha: Vec<f64>) -> Result<Self> {
        Self::new(alpha)
    }
}

impl From<DirichletParams> for Vec<f64> {
    fn from(p: DirichletParams) -> Self {
        p.alpha
    }
}

impl DirichletParams {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::InvalidAlpha(format!(
                "need at least 2 components, got {}",
                alpha.len()
            )));
        }
        if let Some(a) = alpha.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(Error::InvalidAlpha(format!(
                "component {a} is not positive and finite"
            )));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    /// `alpha_0 = sum_i alpha_i`.
    pub fn concentration(&self) -> f64 {
        self.alpha.iter().sum()
    }

    pub fn mean(&self) -> Vec<f64> {
        let a0 = self.concentration();
        self.alpha.iter().map(|a| a / a0).collect()
    }

    /// `ln B(alpha) = sum_i ln Γ(alpha_i) - ln Γ(alpha_0)`.
    pub fn ln_beta(&self) -> f64 {
        self.alpha
            .iter()
            .map(|&a| ln_gamma_unchecked(a))
            .sum::<f64>()
            - ln_gamma_unchecked(self.concentration())
    }

    /// Normalized independent `Gamma(alpha_i, 1)` draws.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut g: Vec<f64> = self
            .alpha
            .iter()
            .map(|&a| Gamma::new(a, 1.0).expect("validated shape").sample(rng))
            .collect();
        let total: f64 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= total);
        g
    }

    fn check_support(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let sum: f64 = x.iter().sum();
        if x.iter().any(|v| !(*v > 0.0)) || !((sum - 1.0).abs() <= SUPPORT_TOL) {
            return Err(Error::SupportViolation(format!("{x:?} (sum {sum})")));
        }
        Ok(())
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        self.check_support(x)?;
        let body: f64 = self
            .alpha
            .iter()
            .zip(x)
            .map(|(a, v)| (a - 1.0) * v.ln())
            .sum();
        Ok(body - self.ln_beta())
    }

    /// `d log p / d alpha_i = ln x_i - ψ(alpha_i) + ψ(alpha_0)`.
    pub fn grad_log_pdf(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_support(x)?;
        let psi0 = digamma_unchecked(self.concentration());
        Ok(self
            .alpha
            .iter()
            .zip(x)
            .map(|(&a, v)| v.ln() - digamma_unchecked(a) + psi0)
            .collect())
    }

    /// `(alpha_i - 1) / (alpha_0 - D)`; undefined unless every `alpha_i > 1`.
    pub fn mode(&self) -> Result<Vec<f64>> {
        if let Some(a) = self.alpha.iter().find(|a| **a <= 1.0) {
            return Err(Error::ModeUndefined(*a));
        }
        Ok(mode_of(&self.alpha))
    }

    /// Mode after raising every concentration to at least [`MODE_FLOOR`].
    pub fn mode_clamped(&self) -> Vec<f64> {
        if self.alpha.iter().any(|a| *a <= 1.0) {
            log::warn!(
                "concentration {:?} has components <= 1; clamping to {MODE_FLOOR}",
                self.alpha
            );
            let clamped: Vec<f64> = self.alpha.iter().map(|a| a.max(MODE_FLOOR)).collect();
            return mode_of(&clamped);
        }
        mode_of(&self.alpha)
    }

    /// `KL(Dir(self) || Dir(other))` in closed form.
    pub fn kl(&self, other: &Self) -> Result<f64> {
        if other.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let psi0 = digamma_unchecked(self.concentration());
        let cross: f64 = self
            .alpha
            .iter()
            .zip(&other.alpha)
            .map(|(&a, &b)| (a - b) * (digamma_unchecked(a) - psi0))
            .sum();
        Ok((other.ln_beta() - self.ln_beta() + cross).max(0.0))
    }

    /// Gradient of [`Self::kl`] with respect to this distribution's concentrations:
    /// `(alpha_i - beta_i) ψ'(alpha_i) - (alpha_0 - beta_0) ψ'(alpha_0)`.
    pub fn kl_grad(&self, other: &Self) -> Result<Vec<f64>> {
        if other.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let tail = (self.concentration() - other.concentration())
            * trigamma_unchecked(self.concentration());
        Ok(self
            .alpha
            .iter()
            .zip(&other.alpha)
            .map(|(&a, &b)| (a - b) * trigamma_unchecked(a) - tail)
            .collect())
    }

    pub fn entropy(&self) -> f64 {
        let a0 = self.concentration();
        let d = self.dim() as f64;
        let tail: f64 = self
            .alpha
            .iter()
            .map(|&a| (a - 1.0) * digamma_unchecked(a))
            .sum();
        self.ln_beta() + (a0 - d) * digamma_unchecked(a0) - tail
    }
}

fn mode_of(alpha: &[f64]) -> Vec<f64> {
    let denom = alpha.iter().sum::<f64>() - alpha.len() as f64;
    alpha.iter().map(|a| (a - 1.0) / denom).collect()
}

/// `1 + kappa v`: a Dirichlet whose mode is exactly `v`.
pub fn init_base(values: &[f64], kappa: f64) -> Result<DirichletParams> {
    check_simplex(values, 1e-9)?;
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "kappa = {kappa} must be positive"
        )));
    }
    DirichletParams::new(values.iter().map(|v| 1.0 + kappa * v).collect())
}

/// `tau_k = t_cur + r_k (t_next - t_cur)` with `r_k` the cumulative sums of
/// the first `K` of the `K + 1` segments. Positions run in generation order.
pub fn segments_to_positions(segments: &[f64], t_cur: f64, t_next: f64) -> Result<Vec<f64>> {
    check_simplex(segments, 1e-9)?;
    let h = t_next - t_cur;
    let mut r = 0.0;
    Ok(segments[..segments.len() - 1]
        .iter()
        .map(|s| {
            r += s;
            t_cur + r * h
        })
        .collect())
}

/// Inverse of [`segments_to_positions`]: differences of the linear ratios.
/// Positions must be ordered from `t_cur` towards `t_next`.
pub fn positions_to_segments(tau: &[f64], t_cur: f64, t_next: f64) -> Result<Vec<f64>> {
    let h = t_next - t_cur;
    let mut prev = 0.0;
    let mut out = Vec::with_capacity(tau.len() + 1);
    for &t in tau {
        let r = (t - t_cur) / h;
        if !(r >= prev && r <= 1.0) {
            return Err(Error::InvalidParams(format!(
                "positions {tau:?} are not ordered inside the interval"
            )));
        }
        out.push(r - prev);
        prev = r;
    }
    out.push(1.0 - prev);
    Ok(out)
}
