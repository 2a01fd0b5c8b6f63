use crate::error::Result;
use crate::ode::GradientField;
use crate::vector::add_scaled;

use super::{StepContext, StepOutput, MAX_HISTORY};
use crate::error::Error;

const AB1: [f64; 1] = [1.0];
const AB2: [f64; 2] = [3.0 / 2.0, -1.0 / 2.0];
const AB3: [f64; 3] = [23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0];
const AB4: [f64; 4] = [55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0];

/// Adams–Bashforth weights for `history_len` stored gradients, current
/// gradient first. Order grows with the history during warmup.
pub fn ipndm_coefficients(history_len: usize) -> &'static [f64] {
    match history_len.min(MAX_HISTORY) {
        0 => &AB1,
        1 => &AB2,
        2 => &AB3,
        _ => &AB4,
    }
}

/// Combines the current gradient with the history.
pub(crate) fn multistep_direction(current: &[f64], history: &[&[f64]]) -> Vec<f64> {
    let used = history.len().min(MAX_HISTORY);
    let coeffs = ipndm_coefficients(used);
    let mut d = vec![0.0; current.len()];
    for (i, v) in d.iter_mut().enumerate() {
        let mut acc = 0.0;
        acc += coeffs[0] * current[i];
        for (c, past) in coeffs[1..].iter().zip(history) {
            acc += c * past[i];
        }
        *v = acc;
    }
    d
}

/// Pseudo-linear multistep step; pushes the start gradient onto the history.
pub fn ipndm_step(field: &dyn GradientField, ctx: &StepContext) -> Result<StepOutput> {
    let (d, nfe) = ctx.start(field);
    let dir = multistep_direction(&d, ctx.history);
    let x_next = add_scaled(ctx.x_cur, ctx.h(), &dir);
    if !crate::vector::all_finite(&x_next) {
        return Err(Error::NonFiniteOutput);
    }
    Ok(StepOutput {
        x_next,
        nfe_total: nfe,
        nfe_parallel: nfe,
        gradient: Some(d),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::euler_step;
    use crate::toy::{ConstantField, GmmModel};

    #[test]
    fn coefficients_sum_to_one() {
        for k in 0..=4 {
            let s: f64 = ipndm_coefficients(k).iter().sum();
            assert!((s - 1.0).abs() < 1e-15, "order {k}: {s}");
        }
        assert_eq!(ipndm_coefficients(3).len(), 4);
    }

    #[test]
    fn warmup_step_equals_euler() {
        let g = GmmModel::default_validation();
        let x = [12.5, -3.25];
        let ctx = StepContext::new(&x, 31.0, 17.0);
        let a = ipndm_step(&g, &ctx).unwrap();
        let b = euler_step(&g, &ctx).unwrap();
        assert_eq!(a.x_next, b.x_next);
        assert_eq!(a.gradient.unwrap(), g.eval(&x, 31.0));
    }

    #[test]
    fn constant_field_exact_at_every_order() {
        let c = ConstantField::new(vec![1.5, -0.5]);
        let x = [0.0, 2.0];
        let past = vec![1.5, -0.5];
        for k in 0..=3 {
            let hist: Vec<&[f64]> = (0..k).map(|_| past.as_slice()).collect();
            let ctx = StepContext {
                history: &hist,
                ..StepContext::new(&x, 5.0, 2.0)
            };
            let out = ipndm_step(&c, &ctx).unwrap();
            for i in 0..2 {
                assert!((out.x_next[i] - (x[i] - 3.0 * c.value[i])).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn fourth_order_combination() {
        // With scalar gradients 1, 2, 3, 4 (current first) the direction is
        // (55 - 118 + 111 - 36) / 24 = 12 / 24.
        let c = ConstantField::new(vec![1.0]);
        let (h1, h2, h3) = ([2.0], [3.0], [4.0]);
        let hist: [&[f64]; 3] = [&h1, &h2, &h3];
        let ctx = StepContext {
            history: &hist,
            ..StepContext::new(&[0.0], 2.0, 1.0)
        };
        let out = ipndm_step(&c, &ctx).unwrap();
        assert!((out.x_next[0] - (-0.5)).abs() < 1e-15);
    }
}
