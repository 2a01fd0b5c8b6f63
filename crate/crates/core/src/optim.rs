//! Adam over a flat parameter vector, with optional coordinate masks.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    /// Per-coordinate update counts; masked coordinates do not advance.
    t: Vec<u32>,
}

impl Adam {
    pub fn new(dim: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: vec![0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.update(params, grad, |_| true);
    }

    /// Updates only coordinates with `mask[i]`.
    pub fn step_masked(&mut self, params: &mut [f64], grad: &[f64], mask: &[bool]) {
        assert_eq!(mask.len(), self.dim());
        self.update(params, grad, |i| mask[i]);
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], active: impl Fn(usize) -> bool) {
        assert_eq!(params.len(), self.dim());
        assert_eq!(grad.len(), self.dim());
        for i in (0..params.len()).filter(|&i| active(i)) {
            self.t[i] += 1;
            let t = self.t[i] as i32;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / (1.0 - self.beta1.powi(t));
            let v_hat = self.v[i] / (1.0 - self.beta2.powi(t));
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
