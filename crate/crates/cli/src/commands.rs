use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use epd_core::checkpoint::Checkpoint;
use epd_core::distill::{train_distill, DistillConfig, TeacherConfig};
use epd_core::eval::{
    baseline_contender, bench_branch_counts, compare_solvers, oracle_endpoints,
    pca_residual_analysis, rows_to_csv, Contender,
};
use epd_core::rdpo::{train_rdpo, OracleReward, PolicyConcentrations, RdpoConfig};
use epd_core::schedule::{DEFAULT_RHO, DEFAULT_T_MAX, DEFAULT_T_MIN};
use epd_core::toy::{prior_sample, CostWrappedField, GmmModel};
use epd_core::{integrate, make_schedule, Error as CoreError, GradientField, Solver, SolverKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{config, io, CliResult};
use crate::opts::{AnalyzeOpts, BenchOpts, CompareOpts, DistillOpts, RdpoOpts, SampleOpts};

const DEFAULT_MODEL_ID: &str = "gmm-2d-four-mode";

/// What a run records about itself in every output it writes.
pub struct Provenance {
    command: &'static str,
    seed: u64,
    config: Value,
}

impl Provenance {
    /// Output locations are dropped so that reruns writing elsewhere
    /// produce identical files.
    pub fn new(command: &'static str, seed: u64, opts: &impl Serialize) -> Self {
        let mut config = serde_json::to_value(opts).expect("options serialize");
        if let Value::Object(map) = &mut config {
            map.remove("out");
            map.remove("log");
        }
        Self {
            command,
            seed,
            config,
        }
    }

    fn csv_header(&self) -> String {
        format!(
            "# epd-cli {} command={} seed={} config={}\n",
            env!("CARGO_PKG_VERSION"),
            self.command,
            self.seed,
            self.config
        )
    }

    fn json(&self) -> Value {
        json!({
            "tool": "epd-cli",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "seed": self.seed,
            "config": self.config,
        })
    }
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(io(path)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(io(Path::new("<stdout>"))),
    }
}

fn emit_csv(out: Option<&Path>, prov: &Provenance, body: &str) -> CliResult<()> {
    emit(out, &(prov.csv_header() + body))
}

fn sidecar(out: Option<&Path>, explicit: Option<&Path>, suffix: &str) -> Option<PathBuf> {
    explicit.map(Path::to_path_buf).or_else(|| {
        out.map(|p| {
            let mut name = p.file_stem().unwrap_or_default().to_os_string();
            name.push(suffix);
            p.with_file_name(name)
        })
    })
}

fn load_model(path: Option<&Path>) -> CliResult<(GmmModel, String)> {
    match path {
        None => Ok((GmmModel::default_validation(), DEFAULT_MODEL_ID.to_string())),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io(p))?;
            let model =
                GmmModel::from_json(&text).map_err(|e| config(format!("{}: {e}", p.display())))?;
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((model, id))
        }
    }
}

fn load_checkpoint(path: Option<&Path>) -> CliResult<Checkpoint> {
    let path = path.ok_or_else(|| config("--ckpt is required"))?;
    let text = fs::read_to_string(path).map_err(io(path))?;
    Ok(Checkpoint::from_json(&text)?)
}

fn check_model(ckpt: &Checkpoint, model_id: &str) {
    if let Some(id) = &ckpt.model_id {
        if id != model_id {
            log::warn!("checkpoint was distilled on model {id:?}, running on {model_id:?}");
        }
    }
}

fn noises(dim: usize, count: usize, t_max: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| prior_sample(dim, t_max, &mut rng))
        .collect()
}

fn positive(name: &str, value: usize) -> CliResult<()> {
    if value == 0 {
        return Err(config(format!("--{name} must be at least 1")));
    }
    Ok(())
}

pub fn distill(o: &DistillOpts) -> CliResult<()> {
    positive("k", o.k)?;
    positive("nfe", o.nfe)?;
    positive("epochs", o.epochs)?;
    positive("batch", o.batch)?;
    positive("pool", o.pool)?;
    if !matches!(o.variant, SolverKind::Epd | SolverKind::EpdPlugin) {
        return Err(config("--variant must be epd or epd-plugin"));
    }
    let n = o
        .variant
        .steps_for_parallel_nfe(o.nfe, o.afs)
        .ok_or_else(|| {
            config(format!(
                "--nfe {} is unreachable: nfe{} must be even",
                o.nfe,
                if o.afs {
                    " + 1 (analytical first step)"
                } else {
                    ""
                }
            ))
        })?;
    let (model, model_id) = load_model(o.model.as_deref())?;
    let schedule = make_schedule(o.schedule, n, o.t_min, o.t_max, o.rho)?;
    let cfg = DistillConfig {
        k: o.k,
        epochs: o.epochs,
        batch_size: o.batch,
        lr: o.lr,
        pool_size: o.pool,
        fd_step: o.fd_step,
        afs: o.afs,
        variant: o.variant,
        teacher: TeacherConfig {
            solver: o.teacher,
            m_intermediate: o.m,
        },
    };
    let prov = Provenance::new("distill", o.seed, o);
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let run = train_distill(&model, &schedule, &cfg, &mut rng)?;
    if let Some(last) = run.loss_history.last() {
        log::info!("distill done: mean loss {:.4e}", last.mean());
    }
    let mut ckpt = run.checkpoint(&schedule, &cfg)?;
    ckpt.model_id = Some(model_id);
    ckpt.provenance = Some(prov.json());
    if let Some(log_path) = sidecar(o.out.as_deref(), o.log.as_deref(), ".loss.csv") {
        emit_csv(Some(&log_path), &prov, &run.to_csv())?;
    }
    emit(o.out.as_deref(), &(ckpt.to_json() + "\n"))
}

pub fn rdpo(o: &RdpoOpts) -> CliResult<()> {
    positive("contexts", o.contexts)?;
    positive("iters", o.iters)?;
    positive("ppo-epochs", o.ppo_epochs)?;
    if o.group < 2 {
        return Err(config("--group must be at least 2"));
    }
    let ckpt = load_checkpoint(o.ckpt.as_deref())?;
    let (model, model_id) = load_model(o.model.as_deref())?;
    check_model(&ckpt, &model_id);
    let cfg = RdpoConfig {
        clip_eps: o.clip,
        kl_coeff: o.kl,
        lr: o.lr,
        group_size: o.group,
        contexts: o.contexts,
        ppo_epochs: o.ppo_epochs,
        kappa: o.kappa,
        iterations: o.iters,
        lr_schedule: o.lr_schedule,
    };
    cfg.validate().map_err(|e| config(e.to_string()))?;
    let prov = Provenance::new("rdpo", o.seed, o);
    let reward = OracleReward {
        field: &model,
        t_min: ckpt.schedule.t_min(),
        t_max: ckpt.schedule.t_max(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let mut run = train_rdpo(&model, &ckpt, &cfg, &reward, &mut rng)?;
    run.policy.provenance = Some(prov.json());
    if let Some(log_path) = sidecar(o.out.as_deref(), o.log.as_deref(), ".log.csv") {
        emit_csv(Some(&log_path), &prov, &run.to_csv())?;
    }
    emit(o.out.as_deref(), &(run.policy.to_json() + "\n"))
}

fn load_policy(path: &Path, ckpt: &Checkpoint) -> CliResult<PolicyConcentrations> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let policy = PolicyConcentrations::from_json(&text)?;
    if policy.schedule.times() != ckpt.schedule.times() || policy.branches() != ckpt.branches() {
        return Err(CoreError::InvariantViolation(format!(
            "policy {} was not trained from this checkpoint (schedule or branch count differs)",
            path.display()
        ))
        .into());
    }
    Ok(policy)
}

fn endpoints_csv(ends: &[Vec<f64>]) -> String {
    let dim = ends.first().map_or(0, Vec::len);
    let mut out = String::from("index");
    for d in 0..dim {
        write!(out, ",x{d}").unwrap();
    }
    out.push('\n');
    for (i, x) in ends.iter().enumerate() {
        write!(out, "{i}").unwrap();
        for v in x {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn sample(o: &SampleOpts) -> CliResult<()> {
    positive("count", o.count)?;
    let ckpt = load_checkpoint(o.ckpt.as_deref())?;
    let (model, model_id) = load_model(o.model.as_deref())?;
    check_model(&ckpt, &model_id);
    let solver = match &o.policy {
        Some(p) => load_policy(p, &ckpt)?.mode_solver()?,
        None => ckpt.solver(),
    };
    let prov = Provenance::new("sample", o.seed, o);
    let xs = noises(model.dim(), o.count, ckpt.schedule.t_max(), o.seed);
    let ends: Vec<Vec<f64>> = xs
        .par_iter()
        .map(|x| {
            Ok(integrate(&model, &solver, &ckpt.schedule, x, ckpt.afs)?
                .endpoint()
                .to_vec())
        })
        .collect::<CliResult<_>>()?;
    emit_csv(o.out.as_deref(), &prov, &endpoints_csv(&ends))
}

pub fn compare(o: &CompareOpts) -> CliResult<()> {
    positive("count", o.count)?;
    let (model, model_id) = load_model(o.model.as_deref())?;
    let mut contenders = Vec::new();
    for &nfe in &o.nfe {
        positive("nfe", nfe)?;
        for &kind in &o.solvers {
            if matches!(kind, SolverKind::Epd | SolverKind::EpdPlugin) {
                return Err(config(
                    "--solvers takes baselines only; pass EPD checkpoints with --ckpt",
                ));
            }
            let Some(mut c) = baseline_contender(kind, nfe, o.afs, DEFAULT_T_MIN, DEFAULT_T_MAX)?
            else {
                log::warn!("{} cannot hit parallel NFE {nfe}; skipped", kind.name());
                continue;
            };
            if let Some(kind) = o.schedule {
                c.schedule = make_schedule(
                    kind,
                    c.schedule.n_steps(),
                    DEFAULT_T_MIN,
                    DEFAULT_T_MAX,
                    DEFAULT_RHO,
                )?;
            }
            contenders.push(c);
        }
    }
    for path in &o.ckpt {
        let ckpt = load_checkpoint(Some(path))?;
        check_model(&ckpt, &model_id);
        if ckpt.schedule.t_min() != DEFAULT_T_MIN || ckpt.schedule.t_max() != DEFAULT_T_MAX {
            return Err(config(format!(
                "{}: time range differs from the oracle's",
                path.display()
            )));
        }
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        contenders.push(Contender {
            name: format!("{}:{stem}", ckpt.variant.name()),
            solver: ckpt.solver(),
            schedule: ckpt.schedule.clone(),
            afs: ckpt.afs,
        });
    }
    let prov = Provenance::new("compare", o.seed, o);
    let xs = noises(model.dim(), o.count, DEFAULT_T_MAX, o.seed);
    let oracle = oracle_endpoints(&model, &xs, DEFAULT_T_MIN, DEFAULT_T_MAX)?;
    let rows = compare_solvers(&model, &contenders, &xs, &oracle)?;
    emit_csv(o.out.as_deref(), &prov, &rows_to_csv(&rows))
}

pub fn bench(o: &BenchOpts) -> CliResult<()> {
    positive("steps", o.steps)?;
    positive("reps", o.reps)?;
    for &k in &o.ks {
        positive("ks", k)?;
    }
    if !(o.cost_ms >= 0.0 && o.cost_ms.is_finite()) {
        return Err(config("--cost-ms must be a nonnegative number"));
    }
    let (model, _) = load_model(o.model.as_deref())?;
    let field = CostWrappedField::new(model, o.cost_ms);
    let schedule = make_schedule(
        o.schedule,
        o.steps,
        DEFAULT_T_MIN,
        DEFAULT_T_MAX,
        DEFAULT_RHO,
    )?;
    let x = noises(field.dim(), 1, DEFAULT_T_MAX, o.seed).remove(0);
    let prov = Provenance::new("bench", o.seed, o);
    let rows = bench_branch_counts(
        &field, &schedule, &x, &o.ks, o.afs, o.warmup, o.reps, o.threads,
    )?;
    let mut body = String::from("k,reps,mean_ms,std_ms,ci_lo,ci_hi\n");
    for r in &rows {
        let s = &r.stats;
        let (lo, hi) = s.ci95_ms.map_or((String::new(), String::new()), |(a, b)| {
            (a.to_string(), b.to_string())
        });
        writeln!(
            body,
            "{},{},{},{},{lo},{hi}",
            r.k, s.reps, s.mean_ms, s.std_ms
        )
        .unwrap();
    }
    emit_csv(o.out.as_deref(), &prov, &body)
}

pub fn analyze(o: &AnalyzeOpts) -> CliResult<()> {
    positive("count", o.count)?;
    positive("steps", o.steps)?;
    let (model, model_id) = load_model(o.model.as_deref())?;
    let (solver, schedule, afs) = match &o.ckpt {
        Some(path) => {
            let ckpt = load_checkpoint(Some(path))?;
            check_model(&ckpt, &model_id);
            (ckpt.solver(), ckpt.schedule.clone(), ckpt.afs)
        }
        None => {
            let solver = match o.solver {
                SolverKind::Euler => Solver::Euler,
                SolverKind::Heun => Solver::Heun,
                SolverKind::Dpm2 => Solver::Dpm2,
                SolverKind::Ipndm => Solver::Ipndm,
                _ => {
                    return Err(config(
                        "--solver must be a baseline; pass EPD checkpoints with --ckpt",
                    ))
                }
            };
            let schedule = make_schedule(
                o.schedule,
                o.steps,
                DEFAULT_T_MIN,
                DEFAULT_T_MAX,
                DEFAULT_RHO,
            )?;
            (solver, schedule, false)
        }
    };
    let prov = Provenance::new("analyze", o.seed, o);
    let xs = noises(model.dim(), o.count, schedule.t_max(), o.seed);
    let trajectories = xs
        .par_iter()
        .map(|x| integrate(&model, &solver, &schedule, x, afs))
        .collect::<Result<Vec<_>, _>>()?;
    let report = pca_residual_analysis(&trajectories)?;
    if report.degenerate > 0 {
        log::info!(
            "{} of {} trajectories are straight lines",
            report.degenerate,
            report.trajectories
        );
    }
    emit_csv(o.out.as_deref(), &prov, &report.to_csv())
}
