//! Residual Dirichlet policy optimization over solver positions and
//! mixture weights.
//!
//! Each interval carries a Dirichlet over `K + 1` segments (whose cumulative
//! sums place the branches linearly inside the interval) and, for `K >= 2`,
//! a Dirichlet over the `K` mixture weights. Concentrations are
//! `base * exp(delta)`; only the residuals `delta` are trained. The time-scale
//! factors and output offset of the distilled solver stay frozen.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ScheduleRecord, SCHEMA_VERSION};
use crate::dirichlet::{init_base, segments_to_positions, DirichletParams, DEFAULT_KAPPA};
use crate::error::{Error, Result};
use crate::eval::oracle_endpoint;
use crate::ode::{integrate, GradientField};
use crate::optim::Adam;
use crate::params::MaterializedStepParams;
use crate::schedule::TimeSchedule;
use crate::solvers::{BranchExecution, EpdSolver, Solver, SolverKind};
use crate::toy::prior_sample;
use crate::vector::squared_distance;

/// Policy factors of one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStep {
    pub base_pos: DirichletParams,
    /// Absent for a single branch, whose weight is always 1.
    pub base_mix: Option<DirichletParams>,
    pub delta_pos: Vec<f64>,
    pub delta_mix: Vec<f64>,
    /// Distilled time-scale factors in position order; `delta = (s - 1) tau`.
    pub time_scale: Vec<f64>,
    /// Distilled output offset.
    pub o: f64,
}

impl PolicyStep {
    fn scaled(base: &DirichletParams, delta: &[f64]) -> DirichletParams {
        let alpha = base
            .alpha()
            .iter()
            .zip(delta)
            .map(|(a, d)| a * d.exp())
            .collect();
        DirichletParams::new(alpha).expect("positive base times exp stays positive")
    }

    pub fn alpha_pos(&self) -> DirichletParams {
        Self::scaled(&self.base_pos, &self.delta_pos)
    }

    pub fn alpha_mix(&self) -> Option<DirichletParams> {
        self.base_mix
            .as_ref()
            .map(|b| Self::scaled(b, &self.delta_mix))
    }

    fn width(&self) -> usize {
        self.delta_pos.len() + self.delta_mix.len()
    }
}

/// Residual Dirichlet policy around a distilled solver.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConcentrations {
    pub schedule: TimeSchedule,
    pub afs: bool,
    pub variant: SolverKind,
    pub kappa: f64,
    pub model_id: Option<String>,
    pub provenance: Option<serde_json::Value>,
    pub steps: Vec<PolicyStep>,
}

/// One draw of segments and weights for every interval.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    pub segments: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
}

impl PolicyConcentrations {
    /// Base concentrations `1 + kappa v` from a distilled checkpoint, with
    /// zero residuals. Branches are reordered by their linear position so the
    /// segments are nonnegative.
    pub fn from_checkpoint(ckpt: &Checkpoint, kappa: f64) -> Result<Self> {
        ckpt.validate()?;
        let mut steps = Vec::with_capacity(ckpt.params.len());
        for (n, raw) in ckpt.params.iter().enumerate() {
            let (t_cur, t_next) = ckpt.schedule.interval(n);
            let m = raw.materialize(t_cur, t_next);
            let scale = raw.factors().s;
            let k = m.branches();
            let ratio: Vec<f64> = m
                .tau
                .iter()
                .map(|t| (t - t_cur) / (t_next - t_cur))
                .collect();
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| ratio[a].total_cmp(&ratio[b]));
            let mut segments = Vec::with_capacity(k + 1);
            let mut prev = 0.0;
            for &i in &order {
                segments.push((ratio[i] - prev).max(0.0));
                prev = ratio[i];
            }
            segments.push((1.0 - prev).max(0.0));
            let total: f64 = segments.iter().sum();
            segments.iter_mut().for_each(|s| *s /= total);
            let lambda: Vec<f64> = order.iter().map(|&i| m.lambda[i]).collect();
            let base_mix = if k >= 2 {
                Some(init_base(&lambda, kappa)?)
            } else {
                None
            };
            steps.push(PolicyStep {
                base_pos: init_base(&segments, kappa)?,
                delta_pos: vec![0.0; k + 1],
                delta_mix: vec![0.0; if k >= 2 { k } else { 0 }],
                base_mix,
                time_scale: order.iter().map(|&i| scale[i]).collect(),
                o: m.o,
            });
        }
        Ok(Self {
            schedule: ckpt.schedule.clone(),
            afs: ckpt.afs,
            variant: ckpt.variant,
            kappa,
            model_id: ckpt.model_id.clone(),
            provenance: None,
            steps,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn branches(&self) -> usize {
        self.steps.first().map_or(0, |s| s.time_scale.len())
    }

    /// Residuals flattened as `[delta_pos.., delta_mix..]` per interval.
    pub fn deltas(&self) -> Vec<f64> {
        self.steps
            .iter()
            .flat_map(|s| s.delta_pos.iter().chain(&s.delta_mix).copied())
            .collect()
    }

    pub fn set_deltas(&mut self, flat: &[f64]) -> Result<()> {
        let width: usize = self.steps.iter().map(PolicyStep::width).sum();
        if flat.len() != width {
            return Err(Error::DimensionMismatch {
                expected: width,
                got: flat.len(),
            });
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite residual".into()));
        }
        let mut off = 0;
        for s in &mut self.steps {
            let (p, m) = (s.delta_pos.len(), s.delta_mix.len());
            s.delta_pos.copy_from_slice(&flat[off..off + p]);
            s.delta_mix.copy_from_slice(&flat[off + p..off + p + m]);
            off += p + m;
        }
        Ok(())
    }

    /// Draws every factor; returns the sample and its joint log-density.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(PolicySample, f64)> {
        let mut segments = Vec::with_capacity(self.n_steps());
        let mut lambda = Vec::with_capacity(self.n_steps());
        for s in &self.steps {
            segments.push(s.alpha_pos().sample(rng));
            lambda.push(match s.alpha_mix() {
                Some(a) => a.sample(rng),
                None => vec![1.0],
            });
        }
        let sample = PolicySample { segments, lambda };
        let logp = self.log_prob(&sample)?;
        Ok((sample, logp))
    }

    /// Sum of the per-factor log-densities.
    pub fn log_prob(&self, sample: &PolicySample) -> Result<f64> {
        let mut total = 0.0;
        for (n, s) in self.steps.iter().enumerate() {
            total += s.alpha_pos().log_pdf(&sample.segments[n])?;
            if let Some(a) = s.alpha_mix() {
                total += a.log_pdf(&sample.lambda[n])?;
            }
        }
        Ok(total)
    }

    /// Gradient of [`Self::log_prob`] with respect to the flat residuals.
    pub fn grad_log_prob(&self, sample: &PolicySample) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.deltas().len());
        for (n, s) in self.steps.iter().enumerate() {
            let a = s.alpha_pos();
            let g = a.grad_log_pdf(&sample.segments[n])?;
            out.extend(g.iter().zip(a.alpha()).map(|(g, a)| g * a));
            if let Some(a) = s.alpha_mix() {
                let g = a.grad_log_pdf(&sample.lambda[n])?;
                out.extend(g.iter().zip(a.alpha()).map(|(g, a)| g * a));
            }
        }
        Ok(out)
    }

    /// `sum_n KL(pos_n || base_pos_n) + KL(mix_n || base_mix_n)`.
    pub fn kl_to_base(&self) -> Result<f64> {
        let mut total = 0.0;
        for s in &self.steps {
            total += s.alpha_pos().kl(&s.base_pos)?;
            if let (Some(a), Some(b)) = (s.alpha_mix(), &s.base_mix) {
                total += a.kl(b)?;
            }
        }
        Ok(total)
    }

    pub fn grad_kl_to_base(&self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for s in &self.steps {
            let a = s.alpha_pos();
            out.extend(
                a.kl_grad(&s.base_pos)?
                    .iter()
                    .zip(a.alpha())
                    .map(|(g, a)| g * a),
            );
            if let (Some(a), Some(b)) = (s.alpha_mix(), &s.base_mix) {
                out.extend(a.kl_grad(b)?.iter().zip(a.alpha()).map(|(g, a)| g * a));
            }
        }
        Ok(out)
    }

    /// Modes of every factor, clamping concentrations that drifted to 1 or below.
    pub fn mode(&self) -> PolicySample {
        PolicySample {
            segments: self
                .steps
                .iter()
                .map(|s| s.alpha_pos().mode_clamped())
                .collect(),
            lambda: self
                .steps
                .iter()
                .map(|s| {
                    s.alpha_mix()
                        .map_or_else(|| vec![1.0], |a| a.mode_clamped())
                })
                .collect(),
        }
    }

    /// Step parameters with the sampled segments and weights in place.
    pub fn materialize(&self, sample: &PolicySample) -> Result<Vec<MaterializedStepParams>> {
        self.steps
            .iter()
            .enumerate()
            .map(|(n, s)| {
                let (t_cur, t_next) = self.schedule.interval(n);
                let tau = segments_to_positions(&sample.segments[n], t_cur, t_next)?;
                let delta = tau
                    .iter()
                    .zip(&s.time_scale)
                    .map(|(t, sc)| (sc - 1.0) * t)
                    .collect();
                let m = MaterializedStepParams {
                    tau,
                    lambda: sample.lambda[n].clone(),
                    delta,
                    o: s.o,
                };
                m.validate(t_cur, t_next)?;
                Ok(m)
            })
            .collect()
    }

    pub fn solver_for(&self, sample: &PolicySample, execution: BranchExecution) -> Result<Solver> {
        let epd = EpdSolver::new(self.materialize(sample)?).with_execution(execution);
        Ok(match self.variant {
            SolverKind::EpdPlugin => Solver::EpdPlugin(epd),
            _ => Solver::Epd(epd),
        })
    }

    /// Deterministic inference solver built from the policy modes.
    pub fn mode_solver(&self) -> Result<Solver> {
        self.solver_for(&self.mode(), BranchExecution::Parallel)
    }

    pub fn to_file(&self) -> PolicyFile {
        PolicyFile {
            version: SCHEMA_VERSION,
            kappa: self.kappa,
            schedule: ScheduleRecord {
                kind: self.schedule.kind,
                rho: self.schedule.rho,
                times: self.schedule.times().to_vec(),
            },
            afs: self.afs,
            variant: self.variant,
            model_id: self.model_id.clone(),
            provenance: self.provenance.clone(),
            steps: self
                .steps
                .iter()
                .enumerate()
                .map(|(n, s)| PolicyStepRecord {
                    n,
                    base_pos: s.base_pos.alpha().to_vec(),
                    base_mix: s.base_mix.as_ref().map(|b| b.alpha().to_vec()),
                    delta_pos: s.delta_pos.clone(),
                    delta_mix: s.delta_mix.clone(),
                    time_scale: s.time_scale.clone(),
                    o: s.o,
                })
                .collect(),
        }
    }

    pub fn from_file(file: PolicyFile) -> Result<Self> {
        if file.version != SCHEMA_VERSION {
            return Err(Error::SchemaMismatch(format!(
                "version {} (expected {SCHEMA_VERSION})",
                file.version
            )));
        }
        let schedule =
            TimeSchedule::from_times(file.schedule.kind, file.schedule.rho, file.schedule.times)
                .map_err(|e| Error::SchemaMismatch(e.to_string()))?;
        if file.steps.len() != schedule.n_steps() {
            return Err(Error::SchemaMismatch(format!(
                "{} policy steps for a {}-step schedule",
                file.steps.len(),
                schedule.n_steps()
            )));
        }
        let mut steps = Vec::with_capacity(file.steps.len());
        for (i, r) in file.steps.into_iter().enumerate() {
            let bad = |m: String| Error::InvariantViolation(format!("policy step {i}: {m}"));
            if r.n != i {
                return Err(Error::SchemaMismatch(format!(
                    "policy step {i} labelled {}",
                    r.n
                )));
            }
            let k = r.time_scale.len();
            if r.base_pos.len() != k + 1 || r.delta_pos.len() != k + 1 {
                return Err(bad("position factor has the wrong dimension".into()));
            }
            let base_mix = match r.base_mix {
                Some(b) if k >= 2 && b.len() == k && r.delta_mix.len() == k => {
                    Some(DirichletParams::new(b).map_err(|e| bad(e.to_string()))?)
                }
                None if k == 1 && r.delta_mix.is_empty() => None,
                _ => return Err(bad("mixture factor has the wrong dimension".into())),
            };
            if r.delta_pos
                .iter()
                .chain(&r.delta_mix)
                .chain(&r.time_scale)
                .chain([&r.o])
                .any(|v| !v.is_finite())
            {
                return Err(bad("non-finite value".into()));
            }
            steps.push(PolicyStep {
                base_pos: DirichletParams::new(r.base_pos).map_err(|e| bad(e.to_string()))?,
                base_mix,
                delta_pos: r.delta_pos,
                delta_mix: r.delta_mix,
                time_scale: r.time_scale,
                o: r.o,
            });
        }
        if steps
            .iter()
            .any(|s| s.time_scale.len() != steps[0].time_scale.len())
        {
            return Err(Error::SchemaMismatch(
                "branch count differs between steps".into(),
            ));
        }
        Ok(Self {
            schedule,
            afs: file.afs,
            variant: file.variant,
            kappa: file.kappa,
            model_id: file.model_id,
            provenance: file.provenance,
            steps,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("policy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PolicyFile =
            serde_json::from_str(text).map_err(|e| Error::SchemaMismatch(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyStepRecord {
    pub n: usize,
    pub base_pos: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_mix: Option<Vec<f64>>,
    pub delta_pos: Vec<f64>,
    #[serde(default)]
    pub delta_mix: Vec<f64>,
    pub time_scale: Vec<f64>,
    pub o: f64,
}

/// On-disk policy document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    pub version: u32,
    pub kappa: f64,
    pub schedule: ScheduleRecord,
    pub afs: bool,
    pub variant: SolverKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
    pub steps: Vec<PolicyStepRecord>,
}

/// Samples a solver from the policy; returns it with the joint log-density.
pub fn sample_policy_solver<R: Rng + ?Sized>(
    policy: &PolicyConcentrations,
    rng: &mut R,
) -> Result<(Solver, PolicySample, f64)> {
    let (sample, logp) = policy.sample(rng)?;
    let solver = policy.solver_for(&sample, BranchExecution::Sequential)?;
    Ok((solver, sample, logp))
}

/// `-|x0 - reference|^2`.
pub fn toy_reward(x0: &[f64], reference: &[f64]) -> Result<f64> {
    if x0.len() != reference.len() {
        return Err(Error::DimensionMismatch {
            expected: reference.len(),
            got: x0.len(),
        });
    }
    Ok(-squared_distance(x0, reference))
}

/// Scores generated endpoints. `context` is prepared once per initial noise
/// and shared by the whole group.
pub trait RewardModel: Sync {
    type Context: Send + Sync;

    fn context(&self, noise: &[f64]) -> Result<Self::Context>;

    fn reward(&self, endpoint: &[f64], context: &Self::Context) -> Result<f64>;
}

/// [`toy_reward`] against the RK4 oracle endpoint of the same noise.
pub struct OracleReward<'a> {
    pub field: &'a dyn GradientField,
    pub t_min: f64,
    pub t_max: f64,
}

impl RewardModel for OracleReward<'_> {
    type Context = Vec<f64>;

    fn context(&self, noise: &[f64]) -> Result<Vec<f64>> {
        oracle_endpoint(self.field, noise, self.t_min, self.t_max)
    }

    fn reward(&self, endpoint: &[f64], context: &Vec<f64>) -> Result<f64> {
        toy_reward(endpoint, context)
    }
}

/// `A_g = r_g - mean of the other rewards`.
pub fn rloo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::GroupTooSmall(g));
    }
    let total: f64 = rewards.iter().sum();
    Ok(rewards
        .iter()
        .map(|r| r - (total - r) / (g - 1) as f64)
        .collect())
}

fn ratio_terms(logp_new: f64, logp_old: f64, advantage: f64, clip_eps: f64) -> (f64, f64, bool) {
    let ratio = (logp_new - logp_old).exp();
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    let (raw, cap) = (ratio * advantage, clipped * advantage);
    // The gradient flows only while the unclipped term is the minimum.
    let grad = if raw <= cap { -raw } else { 0.0 };
    (-raw.min(cap), grad, ratio != clipped)
}

/// `-min(r A, clip(r, 1 - eps, 1 + eps) A)` with `r = exp(logp_new - logp_old)`.
pub fn ppo_surrogate(logp_new: f64, logp_old: f64, advantage: f64, clip_eps: f64) -> f64 {
    ratio_terms(logp_new, logp_old, advantage, clip_eps).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RdpoConfig {
    pub clip_eps: f64,
    pub kl_coeff: f64,
    pub lr: f64,
    pub group_size: usize,
    /// Initial noises per iteration, each with its own group.
    pub contexts: usize,
    pub ppo_epochs: usize,
    pub kappa: f64,
    pub iterations: usize,
    pub lr_schedule: LrSchedule,
}

/// Learning rate as a function of training progress.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// `lr (1 + cos(pi i / iterations)) / 2`, reaching zero at the end.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, iter: usize, iterations: usize) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Cosine => {
                0.5 * (1.0 + (std::f64::consts::PI * iter as f64 / iterations.max(1) as f64).cos())
            }
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::InvalidConfig(format!(
                "unknown lr schedule {other:?}"
            ))),
        }
    }
}

impl Default for RdpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            kl_coeff: 0.01,
            lr: 0.05,
            group_size: 4,
            contexts: 8,
            ppo_epochs: 1,
            kappa: DEFAULT_KAPPA,
            iterations: 2000,
            lr_schedule: LrSchedule::Cosine,
        }
    }
}

impl RdpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return bad("kl coefficient must be nonnegative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.group_size < 2 {
            return Err(Error::GroupTooSmall(self.group_size));
        }
        if self.contexts < 1 || self.ppo_epochs < 1 {
            return bad("contexts and ppo epochs must be at least 1");
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return bad("kappa must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub sample: PolicySample,
    pub logp_old: f64,
    pub endpoint: Vec<f64>,
    pub reward: f64,
}

/// Rollouts sharing one initial noise.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub context: usize,
    pub noise: Vec<f64>,
    pub members: Vec<Rollout>,
}

impl RolloutGroup {
    pub fn advantages(&self) -> Result<Vec<f64>> {
        rloo_advantages(&self.members.iter().map(|m| m.reward).collect::<Vec<_>>())
    }
}

/// Draws `group_size` solvers for one noise and scores them. Each member
/// gets its own generator seeded from `rng`, so results do not depend on
/// thread scheduling.
pub fn generate_group<M: RewardModel, R: Rng + ?Sized>(
    field: &dyn GradientField,
    policy: &PolicyConcentrations,
    reward: &M,
    context: usize,
    noise: Vec<f64>,
    group_size: usize,
    rng: &mut R,
) -> Result<RolloutGroup> {
    let ctx = reward.context(&noise)?;
    let seeds: Vec<u64> = (0..group_size).map(|_| rng.next_u64()).collect();
    let members = seeds
        .par_iter()
        .map(|&seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let (solver, sample, logp_old) = sample_policy_solver(policy, &mut r)?;
            let traj = integrate(field, &solver, &policy.schedule, &noise, policy.afs)?;
            let endpoint = traj.endpoint().to_vec();
            let value = reward.reward(&endpoint, &ctx)?;
            Ok(Rollout {
                sample,
                logp_old,
                endpoint,
                reward: value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutGroup {
        context,
        noise,
        members,
    })
}

/// Value and residual gradient of the training objective, plus the clip
/// fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub value: f64,
    pub grad: Vec<f64>,
    pub kl: f64,
    pub clip_fraction: f64,
}

/// Mean clipped surrogate over every rollout plus `kl_coeff` times the KL to
/// the base policy, with its analytic gradient.
pub fn rdpo_objective(
    policy: &PolicyConcentrations,
    groups: &[RolloutGroup],
    cfg: &RdpoConfig,
) -> Result<Objective> {
    let width = policy.deltas().len();
    let mut grad = vec![0.0; width];
    let mut value = 0.0;
    let mut clipped = 0usize;
    let mut count = 0usize;
    for group in groups {
        let adv = group.advantages()?;
        for (m, a) in group.members.iter().zip(adv) {
            let logp = policy.log_prob(&m.sample)?;
            let (loss, dloss, was_clipped) = ratio_terms(logp, m.logp_old, a, cfg.clip_eps);
            value += loss;
            clipped += usize::from(was_clipped);
            count += 1;
            if dloss != 0.0 {
                let g = policy.grad_log_prob(&m.sample)?;
                grad.iter_mut().zip(g).for_each(|(o, g)| *o += dloss * g);
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidConfig("no rollouts".into()));
    }
    let inv = 1.0 / count as f64;
    value *= inv;
    grad.iter_mut().for_each(|g| *g *= inv);
    let kl = policy.kl_to_base()?;
    if cfg.kl_coeff > 0.0 {
        value += cfg.kl_coeff * kl;
        let gk = policy.grad_kl_to_base()?;
        grad.iter_mut()
            .zip(gk)
            .for_each(|(o, g)| *o += cfg.kl_coeff * g);
    }
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence("non-finite objective".into()));
    }
    Ok(Objective {
        value,
        grad,
        kl,
        clip_fraction: clipped as f64 / count as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStats {
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
}

/// `ppo_epochs` Adam steps on the residuals over a fixed rollout batch.
pub fn policy_update(
    policy: &mut PolicyConcentrations,
    groups: &[RolloutGroup],
    cfg: &RdpoConfig,
    optimizer: &mut Adam,
) -> Result<UpdateStats> {
    let mut clip = 0.0;
    for _ in 0..cfg.ppo_epochs {
        let obj = rdpo_objective(policy, groups, cfg)?;
        clip = obj.clip_fraction;
        let mut d = policy.deltas();
        optimizer.step(&mut d, &obj.grad);
        policy.set_deltas(&d)?;
    }
    let rewards: Vec<f64> = groups
        .iter()
        .flat_map(|g| g.members.iter().map(|m| m.reward))
        .collect();
    Ok(UpdateStats {
        mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
        mean_kl: policy.kl_to_base()?,
        clip_fraction: clip,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub iter: usize,
    pub mean_reward: f64,
    /// KL of the updated policy to its base, summed over factors.
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RdpoRun {
    pub policy: PolicyConcentrations,
    pub optimizer: Adam,
    pub log: Vec<IterationLog>,
}

impl RdpoRun {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,mean_reward,mean_kl,clip_fraction,wall_time\n");
        for l in &self.log {
            writeln!(
                out,
                "{},{},{},{},{}",
                l.iter, l.mean_reward, l.mean_kl, l.clip_fraction, l.wall_seconds
            )
            .unwrap();
        }
        out
    }
}

/// Runs `cfg.iterations` rounds of rollouts and policy updates starting
/// from the distilled checkpoint. Contexts are fresh prior draws.
pub fn train_rdpo<M: RewardModel, R: Rng + ?Sized>(
    field: &dyn GradientField,
    ckpt: &Checkpoint,
    cfg: &RdpoConfig,
    reward: &M,
    rng: &mut R,
) -> Result<RdpoRun> {
    cfg.validate()?;
    let mut policy = PolicyConcentrations::from_checkpoint(ckpt, cfg.kappa)?;
    let mut optimizer = Adam::new(policy.deltas().len(), cfg.lr);
    let mut log = Vec::with_capacity(cfg.iterations);
    let start = Instant::now();
    let t_max = policy.schedule.t_max();
    for iter in 0..cfg.iterations {
        let mut groups = Vec::with_capacity(cfg.contexts);
        for c in 0..cfg.contexts {
            let noise = prior_sample(field.dim(), t_max, rng);
            groups.push(generate_group(
                field,
                &policy,
                reward,
                c,
                noise,
                cfg.group_size,
                rng,
            )?);
        }
        optimizer.lr = cfg.lr * cfg.lr_schedule.factor(iter, cfg.iterations);
        let stats = policy_update(&mut policy, &groups, cfg, &mut optimizer)?;
        log.push(IterationLog {
            iter,
            mean_reward: stats.mean_reward,
            mean_kl: stats.mean_kl,
            clip_fraction: stats.clip_fraction,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if (iter + 1) % 100 == 0 {
            log::info!(
                "rdpo iter {}: reward {:.4e}, kl {:.3e}",
                iter + 1,
                stats.mean_reward,
                stats.mean_kl
            );
        }
    }
    Ok(RdpoRun {
        policy,
        optimizer,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_default;
    use crate::schedule::{make_schedule, ScheduleKind};
    use crate::toy::GmmModel;
    use proptest::prelude::*;

    fn checkpoint(n: usize, k: usize) -> Checkpoint {
        let s = make_schedule(ScheduleKind::Polynomial, n, 0.002, 80.0, 7.0).unwrap();
        let mut raw = init_default(n, k).unwrap();
        // Uneven, unordered branches with nontrivial scales.
        for (i, p) in raw.iter_mut().enumerate() {
            p.r_logit.reverse();
            p.r_logit[0] += 0.3 * i as f64;
            p.lambda_logit[0] = 0.4;
            p.s_logit[0] = -0.7;
            p.sigma_logit[k - 1] = 1.1;
        }
        let mut c = Checkpoint::new(s, raw).unwrap();
        c.afs = true;
        c
    }

    fn groups(policy: &PolicyConcentrations, seed: u64) -> Vec<RolloutGroup> {
        let g = GmmModel::default_validation();
        let reward = OracleReward {
            field: &g,
            t_min: 0.002,
            t_max: 80.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3)
            .map(|c| {
                let noise = prior_sample(2, 80.0, &mut rng);
                generate_group(&g, policy, &reward, c, noise, 4, &mut rng).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_residual_mode_is_the_distilled_solver() {
        let g = GmmModel::default_validation();
        let ckpt = checkpoint(3, 2);
        let policy = PolicyConcentrations::from_checkpoint(&ckpt, 20.0).unwrap();
        let x = [31.0, -55.0];
        let a = integrate(&g, &ckpt.solver(), &ckpt.schedule, &x, true).unwrap();
        let b = integrate(
            &g,
            &policy.mode_solver().unwrap(),
            &policy.schedule,
            &x,
            true,
        )
        .unwrap();
        assert!(squared_distance(a.endpoint(), b.endpoint()).sqrt() < 1e-10);
        // Stage-1 branches were stored out of order and get sorted.
        let m = policy.materialize(&policy.mode()).unwrap();
        for step in &m {
            assert!(step.tau.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn single_branch_has_no_mixture_factor() {
        let policy = PolicyConcentrations::from_checkpoint(&checkpoint(2, 1), 20.0).unwrap();
        assert!(policy.steps.iter().all(|s| s.base_mix.is_none()));
        assert_eq!(policy.deltas().len(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s, _) = policy.sample(&mut rng).unwrap();
        assert!(s.lambda.iter().all(|l| l == &vec![1.0]));
    }

    #[test]
    fn joint_log_prob_is_sum_of_factors() {
        let mut policy = PolicyConcentrations::from_checkpoint(&checkpoint(3, 2), 20.0).unwrap();
        policy
            .set_deltas(&(0..15).map(|i| 0.05 * (i as f64 - 7.0)).collect::<Vec<_>>())
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (s, logp) = policy.sample(&mut rng).unwrap();
        let mut by_hand = 0.0;
        for (n, st) in policy.steps.iter().enumerate() {
            by_hand += st.alpha_pos().log_pdf(&s.segments[n]).unwrap();
            by_hand += st.alpha_mix().unwrap().log_pdf(&s.lambda[n]).unwrap();
        }
        assert!((logp - by_hand).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(policy.sample(&mut rng).unwrap().0, s);
    }

    #[test]
    fn reward_examples() {
        assert_eq!(toy_reward(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(toy_reward(&[3.0], &[1.0]).unwrap(), -4.0);
        assert!(toy_reward(&[1.0], &[1.0, 2.0]).is_err());
        let r: Vec<f64> = [0.5, 1.0, 2.0]
            .iter()
            .map(|d| toy_reward(&[*d, 0.0], &[0.0, 0.0]).unwrap())
            .collect();
        assert!(r[0] > r[1] && r[1] > r[2]);
    }

    #[test]
    fn rloo_examples() {
        let a = rloo_advantages(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        for (x, y) in a.iter().zip([-2.0, -2.0 / 3.0, 2.0 / 3.0, 2.0]) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(rloo_advantages(&[5.0; 4]).unwrap(), vec![0.0; 4]);
        assert!(matches!(
            rloo_advantages(&[1.0]),
            Err(Error::GroupTooSmall(1))
        ));
    }

    #[test]
    fn ppo_examples() {
        assert_eq!(ppo_surrogate(-1.3, -1.3, 0.7, 0.2), -0.7);
        assert!((ppo_surrogate(1.5f64.ln(), 0.0, 1.0, 0.2) + 1.2).abs() < 1e-12);
        assert!((ppo_surrogate(0.5f64.ln(), 0.0, -1.0, 0.2) - 0.8).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rloo_sums_to_zero(r in proptest::collection::vec(-100.0f64..100.0, 2..12)) {
            let s: f64 = rloo_advantages(&r).unwrap().iter().sum();
            prop_assert!(s.abs() < 1e-11);
        }

        #[test]
        fn ratio_one_gives_minus_advantage(lp in -50.0f64..5.0, a in -10.0f64..10.0) {
            prop_assert_eq!(ppo_surrogate(lp, lp, a, 0.2), -a);
        }
    }

    #[test]
    fn objective_at_zero_residual() {
        let policy = PolicyConcentrations::from_checkpoint(&checkpoint(3, 2), 20.0).unwrap();
        let gs = groups(&policy, 11);
        let obj = rdpo_objective(&policy, &gs, &RdpoConfig::default()).unwrap();
        assert_eq!(obj.clip_fraction, 0.0);
        assert_eq!(obj.kl, 0.0);
        // Per group the surrogate is minus the mean advantage, which is zero.
        let scale: f64 = gs
            .iter()
            .flat_map(|g| g.members.iter().map(|m| m.reward.abs()))
            .fold(0.0, f64::max);
        assert!(obj.value.abs() < 1e-12 * scale.max(1.0));
    }

    #[test]
    fn kl_is_positive_away_from_base() {
        let mut policy = PolicyConcentrations::from_checkpoint(&checkpoint(2, 2), 20.0).unwrap();
        let w = policy.deltas().len();
        for i in 0..w {
            let mut d = vec![0.0; w];
            d[i] = 0.1;
            policy.set_deltas(&d).unwrap();
            assert!(policy.kl_to_base().unwrap() > 0.0, "component {i}");
        }
    }

    fn fd_check(policy: &PolicyConcentrations, gs: &[RolloutGroup], cfg: &RdpoConfig) {
        let obj = rdpo_objective(policy, gs, cfg).unwrap();
        let d0 = policy.deltas();
        let h = 1e-6;
        for i in 0..d0.len() {
            let eval = |v: f64| {
                let mut p = policy.clone();
                let mut d = d0.clone();
                d[i] = v;
                p.set_deltas(&d).unwrap();
                rdpo_objective(&p, gs, cfg).unwrap().value
            };
            let fd = (eval(d0[i] + h) - eval(d0[i] - h)) / (2.0 * h);
            let tol = 1e-5 * obj.grad[i].abs().max(fd.abs()).max(1e-3);
            assert!(
                (fd - obj.grad[i]).abs() < tol,
                "coordinate {i}: fd {fd} vs {}",
                obj.grad[i]
            );
        }
    }

    #[test]
    fn analytic_gradient_matches_fd() {
        let mut policy = PolicyConcentrations::from_checkpoint(&checkpoint(3, 2), 20.0).unwrap();
        let gs = groups(&policy, 12);
        // Move off the start so ratios differ from one and the KL is active.
        let d: Vec<f64> = (0..15).map(|i| 0.03 * ((i * 7 % 5) as f64 - 2.0)).collect();
        policy.set_deltas(&d).unwrap();
        let cfg = RdpoConfig {
            kl_coeff: 0.5,
            clip_eps: 0.9,
            ..Default::default()
        };
        fd_check(&policy, &gs, &cfg);
        fd_check(
            &policy,
            &gs,
            &RdpoConfig {
                kl_coeff: 0.0,
                clip_eps: 0.9,
                ..Default::default()
            },
        );
    }

    #[test]
    fn zero_advantage_without_kl_is_a_fixed_point() {
        let mut policy = PolicyConcentrations::from_checkpoint(&checkpoint(2, 2), 20.0).unwrap();
        let mut gs = groups(&policy, 13);
        for g in &mut gs {
            g.members.iter_mut().for_each(|m| m.reward = 1.5);
        }
        let cfg = RdpoConfig {
            kl_coeff: 0.0,
            ..Default::default()
        };
        let mut opt = Adam::new(policy.deltas().len(), cfg.lr);
        let before = policy.deltas();
        policy_update(&mut policy, &gs, &cfg, &mut opt).unwrap();
        assert_eq!(policy.deltas(), before);
    }

    #[test]
    fn kl_pulls_residuals_back() {
        let mut policy = PolicyConcentrations::from_checkpoint(&checkpoint(2, 2), 20.0).unwrap();
        let mut gs = groups(&policy, 14);
        for g in &mut gs {
            g.members.iter_mut().for_each(|m| m.reward = 0.0);
        }
        let d: Vec<f64> = (0..10).map(|i| 0.2 * (i as f64 - 4.5)).collect();
        policy.set_deltas(&d).unwrap();
        let cfg = RdpoConfig {
            kl_coeff: 1e6,
            ..Default::default()
        };
        let obj = rdpo_objective(&policy, &gs, &cfg).unwrap();
        let pull: f64 = obj.grad.iter().zip(&d).map(|(g, d)| g * d).sum();
        assert!(pull > 0.0);
        let mut opt = Adam::new(10, 0.01);
        let kl0 = policy.kl_to_base().unwrap();
        for _ in 0..20 {
            policy_update(&mut policy, &gs, &cfg, &mut opt).unwrap();
        }
        assert!(policy.kl_to_base().unwrap() < kl0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(LrSchedule::Cosine.factor(0, 2000), 1.0);
        assert!((LrSchedule::Cosine.factor(1000, 2000) - 0.5).abs() < 1e-15);
        assert!(LrSchedule::Cosine.factor(2000, 2000).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.factor(1999, 2000), 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let g = GmmModel::default_validation();
        let reward = OracleReward {
            field: &g,
            t_min: 0.002,
            t_max: 80.0,
        };
        let ckpt = checkpoint(2, 2);
        let cfg = RdpoConfig {
            iterations: 5,
            contexts: 2,
            ..Default::default()
        };
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            train_rdpo(&g, &ckpt, &cfg, &reward, &mut rng).unwrap()
        };
        let (a, b) = (run(3), run(3));
        assert_eq!(a.policy, b.policy);
        let rewards = |r: &RdpoRun| r.log.iter().map(|l| l.mean_reward).collect::<Vec<_>>();
        assert_eq!(rewards(&a), rewards(&b));
        assert!(a
            .to_csv()
            .starts_with("iter,mean_reward,mean_kl,clip_fraction,wall_time\n"));
    }

    #[test]
    fn policy_file_round_trip() {
        let mut policy = PolicyConcentrations::from_checkpoint(&checkpoint(3, 2), 20.0).unwrap();
        policy
            .set_deltas(&(0..15).map(|i| 0.01 * i as f64).collect::<Vec<_>>())
            .unwrap();
        let back = PolicyConcentrations::from_json(&policy.to_json()).unwrap();
        assert_eq!(back, policy);
        let mut file = policy.to_file();
        file.steps[1].delta_pos.pop();
        assert!(matches!(
            PolicyConcentrations::from_file(file),
            Err(Error::InvariantViolation(_))
        ));
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            RdpoConfig {
                clip_eps: 1.0,
                ..Default::default()
            },
            RdpoConfig {
                kl_coeff: -1.0,
                ..Default::default()
            },
            RdpoConfig {
                group_size: 1,
                ..Default::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
