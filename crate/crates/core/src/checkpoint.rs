//! JSON persistence for distilled solver parameters.
//!
//! Each branch stores its raw logits together with the interpretable
//! factors `r`, `s`, `sigma`, `lambda`. Either half may be omitted: files
//! transcribed from published tables carry factors only and get their
//! logits recovered on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{MaterializedStepParams, RawStepParams, SCALE_HALF_WIDTH};
use crate::schedule::{ScheduleKind, TimeSchedule};
use crate::solvers::{EpdSolver, Solver, SolverKind};

pub const SCHEMA_VERSION: u32 = 1;
/// Agreement required between stored logits and stored factors.
const FACTOR_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Distill,
    Rdpo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub kind: ScheduleKind,
    #[serde(default = "default_rho")]
    pub rho: f64,
    pub times: Vec<f64>,
}

fn default_rho() -> f64 {
    crate::schedule::DEFAULT_RHO
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_logit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_logit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_logit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_logit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub n: usize,
    pub branches: Vec<BranchRecord>,
}

/// On-disk document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointFile {
    pub version: u32,
    pub stage: Stage,
    pub k: usize,
    pub n_steps: usize,
    pub schedule: ScheduleRecord,
    #[serde(default)]
    pub afs: bool,
    #[serde(default = "default_variant")]
    pub variant: SolverKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    /// Free-form record of the run that produced the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
    pub steps: Vec<StepRecord>,
}

fn default_variant() -> SolverKind {
    SolverKind::Epd
}

/// Validated parameters together with their metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub schedule: TimeSchedule,
    pub params: Vec<RawStepParams>,
    pub afs: bool,
    pub variant: SolverKind,
    pub model_id: Option<String>,
    pub provenance: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(schedule: TimeSchedule, params: Vec<RawStepParams>) -> Result<Self> {
        let ckpt = Self {
            stage: Stage::Distill,
            schedule,
            params,
            afs: false,
            variant: SolverKind::Epd,
            model_id: None,
            provenance: None,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn branches(&self) -> usize {
        self.params.first().map_or(0, RawStepParams::branches)
    }

    pub fn materialized(&self) -> Vec<MaterializedStepParams> {
        self.params
            .iter()
            .enumerate()
            .map(|(n, p)| {
                let (t_cur, t_next) = self.schedule.interval(n);
                p.materialize(t_cur, t_next)
            })
            .collect()
    }

    pub fn solver(&self) -> Solver {
        let epd = EpdSolver::new(self.materialized());
        match self.variant {
            SolverKind::EpdPlugin => Solver::EpdPlugin(epd),
            _ => Solver::Epd(epd),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.variant, SolverKind::Epd | SolverKind::EpdPlugin) {
            return Err(Error::SchemaMismatch(format!(
                "variant {} carries no parameters",
                self.variant.name()
            )));
        }
        if self.params.len() != self.schedule.n_steps() {
            return Err(Error::SchemaMismatch(format!(
                "{} parameter sets for a {}-step schedule",
                self.params.len(),
                self.schedule.n_steps()
            )));
        }
        let k = self.branches();
        for (n, p) in self.params.iter().enumerate() {
            p.validate()
                .map_err(|e| Error::InvariantViolation(format!("step {n}: {e}")))?;
            if p.branches() != k {
                return Err(Error::SchemaMismatch(format!(
                    "step {n} has {} branches, expected {k}",
                    p.branches()
                )));
            }
            let (t_cur, t_next) = self.schedule.interval(n);
            let m = p.materialize(t_cur, t_next);
            m.validate(t_cur, t_next)
                .map_err(|e| Error::InvariantViolation(format!("step {n}: {e}")))?;
            let f = p.factors();
            for v in f.s.iter().chain(&f.sigma) {
                if (v - 1.0).abs() > SCALE_HALF_WIDTH + 1e-12 {
                    return Err(Error::InvariantViolation(format!(
                        "step {n}: factor {v} outside the band"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_file(&self) -> CheckpointFile {
        let steps = self
            .params
            .iter()
            .enumerate()
            .map(|(n, p)| {
                let f = p.factors();
                let branches = (0..p.branches())
                    .map(|k| BranchRecord {
                        r_logit: Some(p.r_logit[k]),
                        lambda_logit: Some(p.lambda_logit[k]),
                        s_logit: Some(p.s_logit[k]),
                        sigma_logit: Some(p.sigma_logit[k]),
                        r: Some(f.r[k]),
                        s: Some(f.s[k]),
                        sigma: Some(f.sigma[k]),
                        lambda: Some(f.lambda[k]),
                    })
                    .collect();
                StepRecord { n, branches }
            })
            .collect();
        CheckpointFile {
            version: SCHEMA_VERSION,
            stage: self.stage,
            k: self.branches(),
            n_steps: self.params.len(),
            schedule: ScheduleRecord {
                kind: self.schedule.kind,
                rho: self.schedule.rho,
                times: self.schedule.times().to_vec(),
            },
            afs: self.afs,
            variant: self.variant,
            model_id: self.model_id.clone(),
            provenance: self.provenance.clone(),
            steps,
        }
    }

    pub fn from_file(file: CheckpointFile) -> Result<Self> {
        if file.version != SCHEMA_VERSION {
            return Err(Error::SchemaMismatch(format!(
                "version {} (expected {SCHEMA_VERSION})",
                file.version
            )));
        }
        if file.k < 1 {
            return Err(Error::SchemaMismatch("k must be at least 1".into()));
        }
        if file.steps.len() != file.n_steps {
            return Err(Error::SchemaMismatch(format!(
                "{} steps listed, n_steps = {}",
                file.steps.len(),
                file.n_steps
            )));
        }
        let schedule =
            TimeSchedule::from_times(file.schedule.kind, file.schedule.rho, file.schedule.times)
                .map_err(|e| Error::SchemaMismatch(e.to_string()))?;
        let mut slots: Vec<Option<RawStepParams>> = vec![None; file.n_steps];
        for step in &file.steps {
            let slot = slots.get_mut(step.n).ok_or_else(|| {
                Error::SchemaMismatch(format!("step index {} out of range", step.n))
            })?;
            if slot.is_some() {
                return Err(Error::SchemaMismatch(format!(
                    "step {} listed twice",
                    step.n
                )));
            }
            if step.branches.len() != file.k {
                return Err(Error::SchemaMismatch(format!(
                    "step {} has {} branches, k = {}",
                    step.n,
                    step.branches.len(),
                    file.k
                )));
            }
            *slot = Some(step_from_records(step)?);
        }
        let ckpt = Self {
            stage: file.stage,
            schedule,
            params: slots
                .into_iter()
                .map(|s| s.expect("every index filled"))
                .collect(),
            afs: file.afs,
            variant: file.variant,
            model_id: file.model_id,
            provenance: file.provenance,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile =
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

fn step_from_records(step: &StepRecord) -> Result<RawStepParams> {
    let all = |f: fn(&BranchRecord) -> Option<f64>| -> Option<Vec<f64>> {
        step.branches.iter().map(f).collect()
    };
    let logits = (
        all(|b| b.r_logit),
        all(|b| b.lambda_logit),
        all(|b| b.s_logit),
        all(|b| b.sigma_logit),
    );
    let factors = (
        all(|b| b.r),
        all(|b| b.s),
        all(|b| b.sigma),
        all(|b| b.lambda),
    );
    let from_factors = match &factors {
        (Some(r), Some(s), Some(sigma), Some(lambda)) => Some(
            RawStepParams::from_factors(r, s, sigma, lambda).map_err(|e| match e {
                Error::InvariantViolation(m) => {
                    Error::InvariantViolation(format!("step {}: {m}", step.n))
                }
                other => other,
            })?,
        ),
        _ => None,
    };
    match (logits, from_factors) {
        ((Some(r_logit), Some(lambda_logit), Some(s_logit), Some(sigma_logit)), recovered) => {
            let raw = RawStepParams {
                r_logit,
                lambda_logit,
                s_logit,
                sigma_logit,
            };
            if let Some(other) = recovered {
                let (a, b) = (raw.factors(), other.factors());
                let pairs =
                    a.r.iter()
                        .zip(&b.r)
                        .chain(a.s.iter().zip(&b.s))
                        .chain(a.sigma.iter().zip(&b.sigma));
                for (x, y) in pairs.chain(a.lambda.iter().zip(&b.lambda)) {
                    if (x - y).abs() > FACTOR_TOL {
                        return Err(Error::InvariantViolation(format!(
                            "step {}: stored factors disagree with stored logits",
                            step.n
                        )));
                    }
                }
            }
            Ok(raw)
        }
        (_, Some(raw)) => Ok(raw),
        _ => Err(Error::SchemaMismatch(format!(
            "step {} lacks both logits and factors",
            step.n
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_default;
    use crate::schedule::make_schedule;

    fn sample_checkpoint() -> Checkpoint {
        let s = make_schedule(ScheduleKind::Uniform, 3, 0.002, 80.0, 1.0).unwrap();
        let mut params = init_default(3, 2).unwrap();
        params[1].r_logit[0] = -0.37;
        params[2].lambda_logit[1] = 1.1;
        params[0].s_logit[1] = 0.123_456_789;
        params[2].sigma_logit[0] = -2.5;
        let mut c = Checkpoint::new(s, params).unwrap();
        c.afs = true;
        c.model_id = Some("gmm-2d-4".into());
        c
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let c = sample_checkpoint();
        let back = Checkpoint::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }

    #[test]
    fn factors_only_rows_materialize() {
        let s = make_schedule(ScheduleKind::Uniform, 1, 0.002, 80.0, 1.0).unwrap();
        let file = CheckpointFile {
            version: 1,
            stage: Stage::Distill,
            k: 2,
            n_steps: 1,
            schedule: ScheduleRecord {
                kind: s.kind,
                rho: s.rho,
                times: s.times().to_vec(),
            },
            afs: true,
            variant: SolverKind::Epd,
            model_id: None,
            provenance: None,
            steps: vec![StepRecord {
                n: 0,
                branches: vec![
                    BranchRecord {
                        r: Some(0.01339),
                        s: Some(0.96349),
                        sigma: Some(0.99731),
                        lambda: Some(0.85185),
                        ..Default::default()
                    },
                    BranchRecord {
                        r: Some(0.67921),
                        s: Some(0.95231),
                        sigma: Some(0.99754),
                        lambda: Some(0.14815),
                        ..Default::default()
                    },
                ],
            }],
        };
        let c = Checkpoint::from_file(file).unwrap();
        let f = c.params[0].factors();
        assert!((f.r[0] - 0.01339).abs() < 1e-12 && (f.s[0] - 0.96349).abs() < 1e-12);
        let m = &c.materialized()[0];
        assert!(m.tau.iter().all(|t| *t > 0.002 && *t < 80.0));
    }

    #[test]
    fn rejects_off_simplex_weights() {
        let mut file = sample_checkpoint().to_file();
        for b in &mut file.steps[0].branches {
            b.r_logit = None;
            b.lambda_logit = None;
            b.s_logit = None;
            b.sigma_logit = None;
            b.lambda = Some(0.45);
        }
        assert!(matches!(
            Checkpoint::from_file(file),
            Err(Error::InvariantViolation(_))
        ));
    }

    #[test]
    fn rejects_inconsistent_factors() {
        let mut file = sample_checkpoint().to_file();
        file.steps[1].branches[0].r = Some(0.9);
        assert!(matches!(
            Checkpoint::from_file(file),
            Err(Error::InvariantViolation(_))
        ));
    }

    #[test]
    fn schema_mismatches() {
        let good = sample_checkpoint().to_file();
        let mut f = good.clone();
        f.version = 2;
        assert!(matches!(
            Checkpoint::from_file(f),
            Err(Error::SchemaMismatch(_))
        ));
        let mut f = good.clone();
        f.k = 3;
        assert!(matches!(
            Checkpoint::from_file(f),
            Err(Error::SchemaMismatch(_))
        ));
        let mut f = good.clone();
        f.steps[2].n = 0;
        assert!(matches!(
            Checkpoint::from_file(f),
            Err(Error::SchemaMismatch(_))
        ));
        let mut f = good.clone();
        f.schedule.times.pop();
        assert!(matches!(
            Checkpoint::from_file(f),
            Err(Error::SchemaMismatch(_))
        ));
        let mut f = good;
        f.steps[0].branches[0] = BranchRecord::default();
        assert!(matches!(
            Checkpoint::from_file(f),
            Err(Error::SchemaMismatch(_))
        ));
        assert!(matches!(
            Checkpoint::from_json("{\"version\": 1}"),
            Err(Error::SchemaMismatch(_))
        ));
        assert!(matches!(
            Checkpoint::from_json("not json"),
            Err(Error::SchemaMismatch(_))
        ));
    }

    #[test]
    fn plugin_variant_builds_plugin_solver() {
        let mut c = sample_checkpoint();
        c.variant = SolverKind::EpdPlugin;
        assert_eq!(c.solver().kind(), SolverKind::EpdPlugin);
        c.variant = SolverKind::Heun;
        assert!(c.validate().is_err());
    }
}
