//! Few-step probability-flow ODE sampling with ensemble parallel directions.
//!
//! The crate bundles the step rules ([`solvers`]), their learnable
//! parameterization ([`params`], [`checkpoint`]), trajectory distillation
//! ([`distill`]), Dirichlet-policy fine-tuning ([`rdpo`]) and evaluation
//! tooling ([`eval`]), all checked against analytic Gaussian-mixture
//! models ([`toy`]) whose scores are exact.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod dirichlet;
pub mod distill;
pub mod error;
pub mod eval;
pub mod ode;
pub mod optim;
pub mod params;
pub mod rdpo;
pub mod schedule;
pub mod solvers;
pub mod special;
pub mod toy;
pub mod vector;

pub use error::{Error, Result};
pub use ode::{integrate, integrate_until, reference_solve, GradientField, Trajectory};
pub use schedule::{make_schedule, ScheduleKind, TimeSchedule};
pub use solvers::{Solver, SolverKind};
