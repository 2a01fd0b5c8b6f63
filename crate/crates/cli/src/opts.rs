//! Flags, config-file merging and resolved per-command settings.
//!
//! Every command resolves its settings in three layers: built-in defaults,
//! then the JSON config file, then flags given on the command line.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use epd_core::distill::TeacherSolver;
use epd_core::rdpo::LrSchedule;
use epd_core::{ScheduleKind, SolverKind};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{config, io, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "epd",
    version,
    about = "Ensemble parallel direction solvers on analytic diffusion models"
)]
pub struct Cli {
    /// Worker threads for batch-parallel work.
    #[arg(long, global = true, env = "EPD_THREADS")]
    pub threads: Option<usize>,
    /// JSON file with default values for any flag of the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Distill EPD parameters from a teacher solver.
    Distill(DistillArgs),
    /// Fine-tune a distilled checkpoint with a residual Dirichlet policy.
    Rdpo(RdpoArgs),
    /// Generate samples with a checkpoint (and optionally a policy's modes).
    Sample(SampleArgs),
    /// Endpoint error of solvers against the RK4 oracle.
    Compare(CompareArgs),
    /// Wall-clock latency of EPD for several branch counts.
    Bench(BenchArgs),
    /// Explained variance of trajectory residuals around the chord.
    Analyze(AnalyzeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Distill(_) => "distill",
            Self::Rdpo(_) => "rdpo",
            Self::Sample(_) => "sample",
            Self::Compare(_) => "compare",
            Self::Bench(_) => "bench",
            Self::Analyze(_) => "analyze",
        }
    }
}

fn parse_schedule(s: &str) -> Result<ScheduleKind, String> {
    s.parse().map_err(|e: epd_core::Error| e.to_string())
}

fn parse_teacher(s: &str) -> Result<TeacherSolver, String> {
    s.parse().map_err(|e: epd_core::Error| e.to_string())
}

fn parse_lr_schedule(s: &str) -> Result<LrSchedule, String> {
    s.parse().map_err(|e: epd_core::Error| e.to_string())
}

fn parse_solver(s: &str) -> Result<SolverKind, String> {
    s.parse().map_err(|e: epd_core::Error| e.to_string())
}

/// `--afs` / `--no-afs` pair.
#[derive(Debug, Args, Clone, Copy)]
pub struct AfsFlags {
    /// Use the analytical first step (x / t) instead of evaluating the field.
    #[arg(long, conflicts_with = "no_afs")]
    pub afs: bool,
    #[arg(long)]
    pub no_afs: bool,
}

impl AfsFlags {
    fn value(self) -> Option<bool> {
        match (self.afs, self.no_afs) {
            (true, _) => Some(true),
            (_, true) => Some(false),
            _ => None,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct DistillArgs {
    /// Gaussian-mixture model JSON (default: the 2D four-mode model).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Sequential field-evaluation rounds per sample.
    #[arg(long)]
    pub nfe: Option<usize>,
    /// Parallel branches per step.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_parser = parse_schedule)]
    pub schedule: Option<ScheduleKind>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub t_min: Option<f64>,
    #[arg(long)]
    pub t_max: Option<f64>,
    #[arg(long, value_parser = parse_teacher)]
    pub teacher: Option<TeacherSolver>,
    /// Teacher times inserted into every student interval.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Cached training noises.
    #[arg(long)]
    pub pool: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub fd_step: Option<f64>,
    /// epd or epd-plugin.
    #[arg(long, value_parser = parse_solver)]
    pub variant: Option<SolverKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint JSON to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss-curve CSV (default: next to --out).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    #[serde(skip)]
    pub afs: AfsFlags,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillOpts {
    pub model: Option<PathBuf>,
    pub nfe: usize,
    pub k: usize,
    pub schedule: ScheduleKind,
    pub rho: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub teacher: TeacherSolver,
    pub m: usize,
    pub epochs: usize,
    pub batch: usize,
    pub pool: usize,
    pub lr: f64,
    pub fd_step: f64,
    pub variant: SolverKind,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub afs: bool,
}

impl Default for DistillOpts {
    fn default() -> Self {
        let d = epd_core::distill::DistillConfig::default();
        Self {
            model: None,
            nfe: 3,
            k: d.k,
            schedule: ScheduleKind::Uniform,
            rho: epd_core::schedule::DEFAULT_RHO,
            t_min: epd_core::schedule::DEFAULT_T_MIN,
            t_max: epd_core::schedule::DEFAULT_T_MAX,
            teacher: d.teacher.solver,
            m: d.teacher.m_intermediate,
            epochs: d.epochs,
            batch: d.batch_size,
            pool: d.pool_size,
            lr: d.lr,
            fd_step: d.fd_step,
            variant: SolverKind::Epd,
            seed: 0,
            out: None,
            log: None,
            afs: true,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct RdpoArgs {
    /// Distilled checkpoint to start from.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Rollouts per initial noise.
    #[arg(long)]
    pub group: Option<usize>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    /// KL coefficient towards the base policy.
    #[arg(long)]
    pub kl: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Initial noises per iteration.
    #[arg(long)]
    pub contexts: Option<usize>,
    #[arg(long)]
    pub ppo_epochs: Option<usize>,
    /// constant or cosine (decays to zero over the run).
    #[arg(long, value_parser = parse_lr_schedule)]
    pub lr_schedule: Option<LrSchedule>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Policy JSON to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training-log CSV (default: next to --out).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RdpoOpts {
    pub ckpt: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub group: usize,
    pub clip: f64,
    pub kappa: f64,
    pub kl: f64,
    pub lr: f64,
    pub contexts: usize,
    pub ppo_epochs: usize,
    pub lr_schedule: LrSchedule,
    pub iters: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for RdpoOpts {
    fn default() -> Self {
        let d = epd_core::rdpo::RdpoConfig::default();
        Self {
            ckpt: None,
            model: None,
            group: d.group_size,
            clip: d.clip_eps,
            kappa: d.kappa,
            kl: d.kl_coeff,
            lr: d.lr,
            contexts: d.contexts,
            ppo_epochs: d.ppo_epochs,
            lr_schedule: d.lr_schedule,
            iters: d.iterations,
            seed: 0,
            out: None,
            log: None,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Policy JSON; its modes replace the checkpoint's positions and weights.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleOpts {
    pub ckpt: Option<PathBuf>,
    pub policy: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub count: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for SampleOpts {
    fn default() -> Self {
        Self {
            ckpt: None,
            policy: None,
            model: None,
            count: 1024,
            seed: 0,
            out: None,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Comma-separated parallel-NFE budgets.
    #[arg(long, value_delimiter = ',')]
    pub nfe: Option<Vec<usize>>,
    /// Comma-separated baselines: euler, heun, dpm2, ipndm.
    #[arg(long, value_delimiter = ',', value_parser = parse_solver)]
    pub solvers: Option<Vec<SolverKind>>,
    /// Schedule for every baseline (default: each solver's usual one).
    #[arg(long, value_parser = parse_schedule)]
    pub schedule: Option<ScheduleKind>,
    /// Distilled checkpoints to score at their own budget (repeatable).
    #[arg(long)]
    pub ckpt: Option<Vec<PathBuf>>,
    /// Held-out noises.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(skip)]
    pub afs: AfsFlags,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareOpts {
    pub model: Option<PathBuf>,
    pub nfe: Vec<usize>,
    pub solvers: Vec<SolverKind>,
    pub schedule: Option<ScheduleKind>,
    pub ckpt: Vec<PathBuf>,
    pub count: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub afs: bool,
}

impl Default for CompareOpts {
    fn default() -> Self {
        Self {
            model: None,
            nfe: vec![3, 5],
            solvers: vec![
                SolverKind::Euler,
                SolverKind::Heun,
                SolverKind::Dpm2,
                SolverKind::Ipndm,
            ],
            schedule: None,
            ckpt: Vec::new(),
            count: 1024,
            seed: 0,
            out: None,
            afs: true,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Busy-wait per field evaluation, in milliseconds.
    #[arg(long)]
    pub cost_ms: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Comma-separated branch counts.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long, value_parser = parse_schedule)]
    pub schedule: Option<ScheduleKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(skip)]
    pub afs: AfsFlags,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchOpts {
    pub model: Option<PathBuf>,
    pub cost_ms: f64,
    pub steps: usize,
    pub ks: Vec<usize>,
    pub warmup: usize,
    pub reps: usize,
    pub schedule: ScheduleKind,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub afs: bool,
    /// Filled from the global flag; recorded since it shapes the timings.
    pub threads: usize,
}

impl Default for BenchOpts {
    fn default() -> Self {
        Self {
            model: None,
            cost_ms: 10.0,
            steps: 5,
            ks: vec![1, 2],
            warmup: 10,
            reps: 100,
            schedule: ScheduleKind::Uniform,
            seed: 0,
            out: None,
            afs: false,
            threads: 0,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Analyze this checkpoint's trajectories instead of a baseline's.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_parser = parse_solver)]
    pub solver: Option<SolverKind>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_parser = parse_schedule)]
    pub schedule: Option<ScheduleKind>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeOpts {
    pub model: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub solver: SolverKind,
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub count: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for AnalyzeOpts {
    fn default() -> Self {
        Self {
            model: None,
            ckpt: None,
            solver: SolverKind::Heun,
            steps: 30,
            schedule: ScheduleKind::Polynomial,
            count: 64,
            seed: 0,
            out: None,
        }
    }
}

/// Layers `flags` over the config file's values over `C::default()`.
///
/// The config file is a JSON object holding flag names in snake case,
/// either at top level or under a key named after the command.
pub fn resolve<C: DeserializeOwned>(
    command: &str,
    config_path: Option<&Path>,
    flags: &impl Serialize,
    afs: Option<bool>,
) -> CliResult<C> {
    let mut merged = Map::new();
    if let Some(path) = config_path {
        let text = std::fs::read_to_string(path).map_err(io(path))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| config(format!("config {}: {e}", path.display())))?;
        let Value::Object(mut obj) = value else {
            return Err(config(format!(
                "config {} must hold a JSON object",
                path.display()
            )));
        };
        if let Some(Value::Object(section)) = obj.remove(command) {
            obj = section;
        }
        merged.extend(obj);
    }
    let Value::Object(given) = serde_json::to_value(flags).expect("flags serialize") else {
        unreachable!("flag structs serialize to objects");
    };
    merged.extend(given.into_iter().filter(|(_, v)| !v.is_null()));
    if let Some(a) = afs {
        merged.insert("afs".into(), Value::Bool(a));
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| config(format!("{command}: {e}")))
}

impl DistillArgs {
    pub fn afs(&self) -> Option<bool> {
        self.afs.value()
    }
}

impl CompareArgs {
    pub fn afs(&self) -> Option<bool> {
        self.afs.value()
    }
}

impl BenchArgs {
    pub fn afs(&self) -> Option<bool> {
        self.afs.value()
    }
}
