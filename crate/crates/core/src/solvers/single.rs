use crate::error::Result;
use crate::ode::{afs_direction, GradientField};
use crate::vector::{add_scaled, all_finite};

use super::{StepContext, StepOutput};
use crate::error::Error;

/// Rectangle rule with the start-point gradient: `x + h eps(x, t_cur)`.
pub fn euler_step(field: &dyn GradientField, ctx: &StepContext) -> Result<StepOutput> {
    let (d, nfe) = ctx.start(field);
    StepOutput::sequential(add_scaled(ctx.x_cur, ctx.h(), &d), nfe)
}

/// Trapezoidal rule: Euler predictor to `t_next`, then the average of the
/// start and end gradients.
pub fn heun_step(field: &dyn GradientField, ctx: &StepContext) -> Result<StepOutput> {
    let h = ctx.h();
    let (d_start, nfe) = ctx.start(field);
    let x_pred = add_scaled(ctx.x_cur, h, &d_start);
    let d_end = field.eval(&x_pred, ctx.t_next);
    let x_next = ctx
        .x_cur
        .iter()
        .zip(d_start.iter().zip(&d_end))
        .map(|(x, (a, b))| x + h * (0.5 * (a + b)))
        .collect();
    StepOutput::sequential(x_next, nfe + 1)
}

/// Midpoint rule at the geometric mean `s = sqrt(t_cur t_next)`.
pub fn dpm2_step(field: &dyn GradientField, ctx: &StepContext) -> Result<StepOutput> {
    let (d_start, nfe) = ctx.start(field);
    let s = (ctx.t_cur * ctx.t_next).sqrt();
    let x_mid = add_scaled(ctx.x_cur, s - ctx.t_cur, &d_start);
    let d_mid = field.eval(&x_mid, s);
    StepOutput::sequential(add_scaled(ctx.x_cur, ctx.h(), &d_mid), nfe + 1)
}

/// Euler step along the analytical direction `x / t_cur`; no evaluations.
pub fn afs_first_step(ctx: &StepContext) -> Result<StepOutput> {
    let d = afs_direction(ctx.x_cur, ctx.t_cur);
    let x_next = add_scaled(ctx.x_cur, ctx.h(), &d);
    if !all_finite(&x_next) {
        return Err(Error::NonFiniteOutput);
    }
    Ok(StepOutput {
        x_next,
        nfe_total: 0,
        nfe_parallel: 0,
        gradient: None,
    })
}
