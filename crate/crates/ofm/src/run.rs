//! Experiment commands behind the CLI: train, eval, check, plot.
//!
//! Each run directory is self-contained: a resolved config snapshot
//! (re-running it reproduces the run), a streamed `metrics.csv`,
//! checkpoints, a `summary.json` with wall time and final metrics, and
//! optional SVG plots. The metrics CSV holds only seed-deterministic
//! columns; wall time lives in the summary so identical seeds produce
//! byte-identical CSVs.

use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::Serialize;

use crate::baselines::{
    rectify_round, straightness, train_fm, FmTrainConfig, PlanSource, ScalarTimeField, TimeField,
    TrainableField, VelocityField,
};
use crate::benchmark::{evaluate_map, lemma2_check, BenchmarkTask, Quadrature};
use crate::config::{Checkpoint, CliOverrides, ExperimentConfig, Method, PotentialKind};
use crate::error::{Error, Result};
use crate::inversion::{conjugate, invert_flow_map, SubproblemOptions};
use crate::net::Activation;
use crate::ode::{integrate, integrate_path, OdeOptions};
use crate::plans::{pair_independent, sample_plan, Distribution, PlanKind};
use crate::plot::{loss_svg, scatter_svg, LossSeries, ScatterLayer, TrajectoryLayer};
use crate::potential::{IcnnPotential, MlpPotential, Potential, QuadraticPotential, TrainablePotential};
use crate::trainer::{dual_ot_loss, ofm_distance, train, TraceRow, TrainHooks};

/// Set the global worker pool once, before any parallel section runs.
pub fn init_workers(workers: Option<usize>) {
    if let Some(n) = workers {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

const CSV_HEADER: &str = "iteration,method,loss,dual_ot_loss,subopt_mean_iters,subopt_failures";

fn csv_line(row: &TraceRow) -> String {
    let opt_f = |v: &Option<f64>| v.map(|x| format!("{x:.12e}")).unwrap_or_default();
    let opt_u = |v: &Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    format!(
        "{},{},{:.12e},{},{},{}",
        row.iteration,
        row.method,
        row.loss,
        opt_f(&row.dual_ot_loss),
        opt_f(&row.subopt_mean_iters),
        opt_u(&row.subopt_failures)
    )
}

/// Parse a metrics.csv written by [`cmd_train`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::Checkpoint(format!("metrics.csv line {i}: expected 6 columns")));
        }
        let parse_f = |s: &str| -> Option<f64> {
            if s.is_empty() {
                None
            } else {
                s.parse().ok()
            }
        };
        rows.push(TraceRow {
            iteration: cols[0].parse().unwrap_or(0),
            method: cols[1].to_string(),
            loss: cols[2].parse().unwrap_or(f64::NAN),
            dual_ot_loss: parse_f(cols[3]),
            subopt_mean_iters: parse_f(cols[4]),
            subopt_failures: if cols[5].is_empty() { None } else { cols[5].parse().ok() },
        });
    }
    Ok(rows)
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub method: String,
    pub seed: u64,
    pub wall_time_s: f64,
    pub final_loss: Option<f64>,
    pub l2_uvp: Option<f64>,
    pub cosine: Option<f64>,
    pub eval_samples: Option<usize>,
    pub straightness_per_round: Vec<f64>,
}

pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub metrics_csv: PathBuf,
    pub checkpoint: PathBuf,
    pub summary: RunSummary,
}

/// Run the configured trainer; writes metrics.csv, checkpoints, the
/// config snapshot, summary.json and any requested plots.
pub fn cmd_train(config_path: &Path, overrides: &CliOverrides) -> Result<RunArtifacts> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    cfg.ofm.train.seed = cfg.seed;
    if let Some(out) = &overrides.out {
        cfg.out_dir = Some(out.clone());
    }
    let method = cfg.validate()?;

    let out_dir = cfg
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}_seed{}", method.tag(), cfg.seed)));
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("config.snapshot.toml"), cfg.to_toml()?)?;

    let task = BenchmarkTask::from_descriptor(&cfg.task)?;
    let start = Instant::now();

    let metrics_csv = out_dir.join("metrics.csv");
    let mut csv = File::create(&metrics_csv)?;
    writeln!(csv, "{CSV_HEADER}")?;

    let checkpoint_path = out_dir.join("checkpoint.json");
    let mut summary = RunSummary {
        method: method.tag().to_string(),
        seed: cfg.seed,
        wall_time_s: 0.0,
        final_loss: None,
        l2_uvp: None,
        cosine: None,
        eval_samples: None,
        straightness_per_round: Vec::new(),
    };

    match method {
        Method::Ofm => {
            let dim = task.dim();
            let mut arch_rng = crate::rng(cfg.seed ^ 0xa5c3);
            let trace = match cfg.ofm.potential {
                PotentialKind::Icnn => {
                    let psi = IcnnPotential::new(dim, &cfg.ofm.hidden, cfg.ofm.activation, &mut arch_rng);
                    let (ema, trace) = run_ofm(psi, &cfg, &task, &mut csv, &out_dir)?;
                    Checkpoint::from_icnn(&ema).save(&checkpoint_path)?;
                    finish_ofm_summary(&ema, &task, &mut summary)?;
                    trace
                }
                PotentialKind::Mlp => {
                    let psi = MlpPotential::new(dim, &cfg.ofm.hidden, cfg.ofm.activation, &mut arch_rng);
                    let (ema, trace) = run_ofm(psi, &cfg, &task, &mut csv, &out_dir)?;
                    Checkpoint::from_mlp_potential(&ema).save(&checkpoint_path)?;
                    finish_ofm_summary(&ema, &task, &mut summary)?;
                    trace
                }
            };
            summary.final_loss = trace.last().map(|r| r.loss);
        }
        Method::Fm | Method::Otcfm => {
            let fm_cfg = field_config(&cfg);
            let mut field =
                TimeField::new(task.dim(), &cfg.field.hidden, cfg.field.activation, &mut crate::rng(cfg.seed ^ 0xf1e1d));
            let trace = train_fm(
                &mut field,
                &fm_cfg,
                &PlanSource::Marginals { p0: &task.p0, p1: &task.p1 },
                method.tag(),
            )?;
            for row in &trace {
                writeln!(csv, "{}", csv_line(row))?;
            }
            Checkpoint::from_time_field(&field).save(&checkpoint_path)?;
            summary.final_loss = trace.last().map(|r| r.loss);
            finish_field_summary(&field, &task, &cfg.field.ode, &mut summary)?;
        }
        Method::Rf => {
            let field = run_rectified::<TimeField>(&cfg, &task, &mut csv, &mut summary, |dim, cfg, rng| {
                TimeField::new(dim, &cfg.field.hidden, cfg.field.activation, rng)
            })?;
            Checkpoint::from_time_field(&field).save(&checkpoint_path)?;
            finish_field_summary(&field, &task, &cfg.field.ode, &mut summary)?;
        }
        Method::Crf => {
            let field = run_rectified::<ScalarTimeField>(&cfg, &task, &mut csv, &mut summary, |dim, cfg, rng| {
                ScalarTimeField::new(dim, &cfg.field.hidden, cfg.field.activation, rng)
            })?;
            Checkpoint::from_scalar_time_field(&field).save(&checkpoint_path)?;
            finish_field_summary(&field, &task, &cfg.field.ode, &mut summary)?;
        }
    }

    summary.wall_time_s = start.elapsed().as_secs_f64();
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;

    if cfg.plots.loss || cfg.plots.scatter || cfg.plots.trajectories {
        drop(csv);
        if cfg.plots.loss {
            plot_from_dir(&out_dir, PlotKindArg::Loss)?;
        }
        if cfg.plots.scatter {
            plot_from_dir(&out_dir, PlotKindArg::Scatter)?;
        }
        if cfg.plots.trajectories {
            plot_from_dir(&out_dir, PlotKindArg::Traj)?;
        }
    }

    Ok(RunArtifacts { out_dir, metrics_csv, checkpoint: checkpoint_path, summary })
}

fn field_config(cfg: &ExperimentConfig) -> FmTrainConfig {
    FmTrainConfig {
        iterations: cfg.field.iterations,
        batch_size: cfg.field.batch_size,
        learning_rate: cfg.field.learning_rate,
        optimizer: cfg.field.optimizer,
        plan: cfg.field.plan,
        mb_size: cfg.field.mb_size,
        seed: cfg.seed,
        log_interval: cfg.field.log_interval,
    }
}

fn run_ofm<P: TrainablePotential + Clone>(
    psi: P,
    cfg: &ExperimentConfig,
    task: &BenchmarkTask,
    csv: &mut File,
    out_dir: &Path,
) -> Result<(P, Vec<TraceRow>)> {
    let mut train_cfg = cfg.ofm.train.clone();
    train_cfg.seed = cfg.seed;
    let mut log = |row: &TraceRow| {
        let _ = writeln!(csv, "{}", csv_line(row));
    };
    let ckpt_dir = out_dir.to_path_buf();
    let hidden = cfg.ofm.hidden.clone();
    let act = cfg.ofm.activation;
    let dim = task.dim();
    let kind = cfg.ofm.potential;
    let mut save_ckpt = move |iter: usize, theta: &DVector<f64>| {
        let model = match kind {
            PotentialKind::Icnn => {
                let mut p = IcnnPotential::new(dim, &hidden, act, &mut crate::rng(0));
                p.set_params_flat(theta);
                Checkpoint::from_icnn(&p)
            }
            PotentialKind::Mlp => {
                let mut p = MlpPotential::new(dim, &hidden, act, &mut crate::rng(0));
                p.set_params_flat(theta);
                Checkpoint::from_mlp_potential(&p)
            }
        };
        let _ = model.save(&ckpt_dir.join(format!("checkpoint_{iter}.json")));
    };
    let mut hooks = TrainHooks {
        on_log: Some(&mut log),
        on_checkpoint: Some(&mut save_ckpt),
        checkpoint_interval: 0,
    };
    train(psi, &train_cfg, task, &mut hooks)
}

fn finish_ofm_summary<P: Potential>(
    ema: &P,
    task: &BenchmarkTask,
    summary: &mut RunSummary,
) -> Result<()> {
    if task.ground_truth.is_some() {
        let report = evaluate_map(|x: &DVector<f64>| ema.grad(x), task, task_eval_seed(task))?;
        summary.l2_uvp = Some(report.l2_uvp);
        summary.cosine = Some(report.cosine);
        summary.eval_samples = Some(report.sample_count);
    }
    Ok(())
}

fn finish_field_summary(
    field: &dyn VelocityField,
    task: &BenchmarkTask,
    ode: &OdeOptions,
    summary: &mut RunSummary,
) -> Result<()> {
    if task.ground_truth.is_some() {
        // ODE-based maps are costly to evaluate; a reduced sample count
        // keeps the summary cheap. The eval command uses the full count.
        let mut small = task.clone();
        small.eval_samples = 2048;
        let report = evaluate_map(
            |x: &DVector<f64>| integrate(|t, z| field.velocity(t, z), x, ode).unwrap_or_else(|_| x.clone()),
            &small,
            task_eval_seed(task),
        )?;
        summary.l2_uvp = Some(report.l2_uvp);
        summary.cosine = Some(report.cosine);
        summary.eval_samples = Some(2048);
    }
    Ok(())
}

fn task_eval_seed(task: &BenchmarkTask) -> u64 {
    use crate::benchmark::TaskDescriptor::*;
    match task.descriptor {
        GaussianOt { seed, .. } | ConvexRidge { seed, .. } => seed ^ 0xe7a1,
        EightGaussians { .. } => 0xe7a1,
    }
}

fn run_rectified<F: TrainableField>(
    cfg: &ExperimentConfig,
    task: &BenchmarkTask,
    csv: &mut File,
    summary: &mut RunSummary,
    make: impl Fn(usize, &ExperimentConfig, &mut crate::Rng) -> F,
) -> Result<F> {
    let fm_cfg = field_config(cfg);
    let mut field = make(task.dim(), cfg, &mut crate::rng(cfg.seed ^ 0xf1e1d));
    let trace =
        train_fm(&mut field, &fm_cfg, &PlanSource::Marginals { p0: &task.p0, p1: &task.p1 }, cfg.method.as_str())?;
    for row in &trace {
        writeln!(csv, "{}", csv_line(row))?;
    }
    summary.final_loss = trace.last().map(|r| r.loss);
    record_straightness(&field, task, &cfg.field.ode, summary);

    for round in 1..cfg.field.rounds.max(1) {
        let mut round_cfg = fm_cfg.clone();
        round_cfg.seed = fm_cfg.seed.wrapping_add(round as u64);
        let out = rectify_round(
            &field,
            |rng| make(task.dim(), cfg, rng),
            &round_cfg,
            &task.p0,
            cfg.field.pool_size,
            &cfg.field.ode,
            cfg.method.as_str(),
        )?;
        field = out.field;
        let offset = round * cfg.field.iterations;
        for mut row in out.trace {
            row.iteration += offset;
            writeln!(csv, "{}", csv_line(&row))?;
            summary.final_loss = Some(row.loss);
        }
        record_straightness(&field, task, &cfg.field.ode, summary);
    }
    Ok(field)
}

fn record_straightness(
    field: &dyn VelocityField,
    task: &BenchmarkTask,
    ode: &OdeOptions,
    summary: &mut RunSummary,
) {
    let mut rng = crate::rng(0x57a1);
    let x0 = task.p0.sample(128, &mut rng);
    if let Ok(s) = straightness(field, &x0, ode) {
        summary.straightness_per_round.push(s);
    }
}

/// Evaluation output of a checkpointed map on a task.
#[derive(Debug, Serialize)]
pub struct EvalOutput {
    pub l2_uvp: f64,
    pub cosine: f64,
    pub sample_count: usize,
    /// Field distance to the ground-truth potential (convex checkpoints
    /// on tasks that carry one).
    pub ofm_distance: Option<f64>,
}

/// Evaluate a checkpoint against a task descriptor (JSON file).
pub fn cmd_eval(
    checkpoint_path: &Path,
    task_path: &Path,
    seed: u64,
    out: Option<&Path>,
) -> Result<EvalOutput> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let desc: crate::benchmark::TaskDescriptor =
        serde_json::from_str(&fs::read_to_string(task_path)?)?;
    let task = BenchmarkTask::from_descriptor(&desc)?;
    if ckpt.dim() != task.dim() {
        return Err(Error::Checkpoint(format!(
            "checkpoint dim {} does not match task dim {}",
            ckpt.dim(),
            task.dim()
        )));
    }

    use crate::config::ModelCheckpoint;
    let output = match &ckpt.model {
        ModelCheckpoint::Icnn { .. } | ModelCheckpoint::MlpPotential { .. } | ModelCheckpoint::Quadratic { .. } => {
            let psi = ckpt.build_potential()?;
            let report = evaluate_map(|x: &DVector<f64>| psi.grad(x), &task, seed)?;
            let dist = task.ground_truth.as_ref().map(|gt| {
                let opts = SubproblemOptions::default();
                let mut rng = crate::rng(seed ^ 0xd157);
                let batch = pair_independent(
                    task.p0.sample(1024, &mut rng),
                    task.p1.sample(1024, &mut rng),
                )
                .expect("equal batches");
                let times: Vec<f64> =
                    (0..1024).map(|_| rng.gen_range(opts.eps_t..1.0 - opts.eps_t)).collect();
                ofm_distance(psi.as_ref(), gt.as_ref(), &batch, &times, &opts)
            });
            EvalOutput {
                l2_uvp: report.l2_uvp,
                cosine: report.cosine,
                sample_count: report.sample_count,
                ofm_distance: dist,
            }
        }
        ModelCheckpoint::TimeField { .. } => {
            let field = ckpt.build_time_field()?;
            eval_field(&field, &task, seed)?
        }
        ModelCheckpoint::ScalarTimeField { .. } => {
            let field = ckpt.build_scalar_time_field()?;
            eval_field(&field, &task, seed)?
        }
    };

    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&output)?)?;
    }
    Ok(output)
}

fn eval_field(field: &dyn VelocityField, task: &BenchmarkTask, seed: u64) -> Result<EvalOutput> {
    let ode = OdeOptions::default();
    let report = evaluate_map(
        |x: &DVector<f64>| integrate(|t, z| field.velocity(t, z), x, &ode).unwrap_or_else(|_| x.clone()),
        task,
        seed,
    )?;
    Ok(EvalOutput {
        l2_uvp: report.l2_uvp,
        cosine: report.cosine,
        sample_count: report.sample_count,
        ofm_distance: None,
    })
}

// ---------------------------------------------------------------------
// Identity-check suites.
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CheckCase {
    pub label: String,
    pub residual: f64,
    pub tolerance: f64,
}

impl CheckCase {
    pub fn passed(&self) -> bool {
        self.residual < self.tolerance
    }
}

#[derive(Debug)]
pub struct CheckReport {
    pub suite: String,
    pub cases: Vec<CheckCase>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CheckCase::passed)
    }

    pub fn failures(&self) -> Vec<&CheckCase> {
        self.cases.iter().filter(|c| !c.passed()).collect()
    }

    pub fn max_residual(&self) -> f64 {
        self.cases.iter().map(|c| c.residual).fold(0.0, f64::max)
    }
}

pub const CHECK_SUITES: [&str; 5] =
    ["lemma2-quadratic", "lemma2-icnn", "thm1-identity", "fenchel-young", "gradcheck"];

/// Run a named identity suite.
pub fn cmd_check(suite: &str) -> Result<CheckReport> {
    let report = match suite {
        "lemma2-quadratic" => check_lemma2_quadratic(),
        "lemma2-icnn" => check_lemma2_icnn(),
        "thm1-identity" => check_thm1_identity(),
        "fenchel-young" => check_fenchel_young(),
        "gradcheck" => check_gradcheck(),
        other => return Err(Error::UnknownSuite(other.to_string())),
    };
    Ok(report)
}

fn randn(d: usize, rng: &mut crate::Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

fn random_spd(d: usize, rng: &mut crate::Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let a = &m * m.transpose() / (d as f64).sqrt() + DMatrix::identity(d, d) * 0.3;
    (&a + a.transpose()) * 0.5
}

pub fn random_small_icnn(d: usize, hidden: &[usize], rng: &mut crate::Rng) -> IcnnPotential {
    let mut psi = IcnnPotential::new(d, hidden, Activation::Softplus, rng);
    let mut theta = psi.params_flat();
    for i in 0..theta.len() - 1 {
        theta[i] += 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    psi.set_params_flat(&theta);
    psi.project_convex();
    psi
}

/// Time-integral identity on random quadratics, D ∈ {1, 2, 8}, 100
/// cases, 256-node quadrature, relative residual < 1e-6.
pub fn check_lemma2_quadratic() -> CheckReport {
    let mut rng = crate::rng(0x11aa);
    let opts = SubproblemOptions { tol_grad: 1e-10, k_sub: 100, ..Default::default() };
    let mut cases = Vec::new();
    let dims = [1usize, 2, 8];
    for i in 0..100 {
        let d = dims[i % dims.len()];
        let psi = QuadraticPotential::new(random_spd(d, &mut rng), randn(d, &mut rng), 0.0)
            .expect("SPD by construction");
        let x0 = randn(d, &mut rng);
        let x1 = randn(d, &mut rng);
        let residual = lemma2_check(&psi, &x0, &x1, 256, Quadrature::GaussLegendre4, &opts)
            .unwrap_or(f64::INFINITY);
        cases.push(CheckCase {
            label: format!("quadratic d={d} case {i}"),
            residual,
            tolerance: 1e-6,
        });
    }
    CheckReport { suite: "lemma2-quadratic".into(), cases }
}

/// Same identity on 30 random small convex networks, residual < 1e-3.
pub fn check_lemma2_icnn() -> CheckReport {
    let mut rng = crate::rng(0x22bb);
    let opts = SubproblemOptions { tol_grad: 1e-10, k_sub: 100, ..Default::default() };
    let mut cases = Vec::new();
    for i in 0..30 {
        let psi = random_small_icnn(2, &[8, 8], &mut rng);
        let x0 = randn(2, &mut rng);
        let x1 = randn(2, &mut rng);
        let residual = lemma2_check(&psi, &x0, &x1, 256, Quadrature::GaussLegendre4, &opts)
            .unwrap_or(f64::INFINITY);
        cases.push(CheckCase { label: format!("icnn case {i}"), residual, tolerance: 1e-3 });
    }
    CheckReport { suite: "lemma2-icnn".into(), cases }
}

/// |L_OFM − 2·L_OT + 2·E⟨x₀,x₁⟩| / |L_OFM| < 1e-3 on fixed batches of
/// 1024 over 20 random potential/plan combinations.
pub fn check_thm1_identity() -> CheckReport {
    let mut rng = crate::rng(0x33cc);
    let opts = SubproblemOptions { tol_grad: 1e-9, k_sub: 100, ..Default::default() };
    let plans = [PlanKind::Independent, PlanKind::Minibatch, PlanKind::Antiminibatch];
    let mut cases = Vec::new();
    for i in 0..20 {
        let icnn_case = i % 5 == 4;
        let d = if icnn_case { 2 } else { [1, 2, 4][i % 3] };
        let p0 = Distribution::Gaussian(crate::plans::Gaussian::standard(d));
        let p1 = Distribution::Gaussian(
            crate::plans::Gaussian::new(randn(d, &mut rng), random_spd(d, &mut rng))
                .expect("SPD by construction"),
        );
        let plan = plans[i % plans.len()];
        let batch = sample_plan(&p0, &p1, plan, 1024, 64, &mut rng).expect("plan batch");

        let nodes = if icnn_case { 32 } else { 64 };
        let psi: Box<dyn Potential> = if icnn_case {
            Box::new(random_small_icnn(2, &[6, 6], &mut rng))
        } else {
            Box::new(
                QuadraticPotential::new(random_spd(d, &mut rng), randn(d, &mut rng), 0.0)
                    .expect("SPD by construction"),
            )
        };

        let l_ofm: f64 = (0..batch.len())
            .map(|j| {
                let (x0, x1) = batch.pair(j);
                crate::benchmark::integrate_unit_interval(Quadrature::GaussLegendre4, nodes, |t| {
                    let x_t = (1.0 - t) * &x0 + t * &x1;
                    ((invert_flow_map(psi.as_ref(), &x_t, t, &opts).z0 - &x0) / t).norm_squared()
                })
            })
            .sum::<f64>()
            / batch.len() as f64;
        let (l_ot, _) = dual_ot_loss(psi.as_ref(), &batch, &opts);
        let cross: f64 = (0..batch.len())
            .map(|j| {
                let (x0, x1) = batch.pair(j);
                x0.dot(&x1)
            })
            .sum::<f64>()
            / batch.len() as f64;
        let residual = (l_ofm - 2.0 * l_ot + 2.0 * cross).abs() / (l_ofm.abs() + 1e-9);
        cases.push(CheckCase {
            label: format!(
                "{} d={d} plan={plan} case {i}",
                if icnn_case { "icnn" } else { "quadratic" }
            ),
            residual,
            tolerance: 1e-3,
        });
    }
    CheckReport { suite: "thm1-identity".into(), cases }
}

/// Fenchel-Young residual |Ψ(x̂) + Ψ̄(y) − ⟨y,x̂⟩| < 1e-8 at conjugate
/// solutions for random convex networks.
pub fn check_fenchel_young() -> CheckReport {
    let mut rng = crate::rng(0x44dd);
    let opts = SubproblemOptions { tol_grad: 1e-10, k_sub: 200, ..Default::default() };
    let mut cases = Vec::new();
    for i in 0..100 {
        let d = [1, 2, 4][i % 3];
        let psi = random_small_icnn(d, &[8, 8], &mut rng);
        let y = randn(d, &mut rng);
        let residual = match conjugate(&psi, &y, &opts) {
            Ok(c) => (psi.eval(&c.argmax) + c.value - y.dot(&c.argmax)).abs(),
            Err(_) => f64::INFINITY,
        };
        cases.push(CheckCase { label: format!("fy d={d} case {i}"), residual, tolerance: 1e-8 });
    }
    CheckReport { suite: "fenchel-young".into(), cases }
}

/// Explicit-gradient check: the detached-solve parameter gradient
/// matches central finite differences of the restoration loss on small
/// networks (D = 2, ≤ 100 parameters), 20 random batches, max relative
/// error < 1e-4.
pub fn check_gradcheck() -> CheckReport {
    let mut rng = crate::rng(0x55ee);
    let opts = SubproblemOptions { tol_grad: 1e-13, k_sub: 300, ..Default::default() };
    let mut cases = Vec::new();
    for case in 0..20 {
        let mut psi = IcnnPotential::new(2, &[4], Activation::Softplus, &mut rng);
        let mut theta0 = psi.params_flat();
        for i in 0..theta0.len() - 1 {
            theta0[i] += 0.2 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        psi.set_params_flat(&theta0);
        psi.project_convex();
        let theta0 = psi.params_flat();
        assert!(theta0.len() <= 100, "gradcheck net must stay small");

        let b = 6;
        let p = Distribution::Gaussian(crate::plans::Gaussian::standard(2));
        let batch = pair_independent(p.sample(b, &mut rng), p.sample(b, &mut rng))
            .expect("equal batches");
        let times: Vec<f64> = (0..b).map(|_| rng.gen_range(0.1..0.9)).collect();

        // Analytic gradient via the explicit scheme.
        let mut grad = DVector::zeros(theta0.len());
        for i in 0..b {
            let (x0, x1) = batch.pair(i);
            let t = times[i];
            let x_t = (1.0 - t) * &x0 + t * &x1;
            let inv = invert_flow_map(&psi, &x_t, t, &opts);
            let mut h = psi.hessian(&inv.z0).expect("small dim") * t;
            for k in 0..2 {
                h[(k, k)] += 1.0 - t;
            }
            let v = h.cholesky().expect("SPD").solve(&((&x0 - &inv.z0) * (2.0 / t)));
            grad.axpy(1.0 / b as f64, &psi.param_grad_directional(&inv.z0, &v), 1.0);
        }

        // Central differences of the restoration loss.
        let fd_loss = |p: &IcnnPotential| {
            crate::trainer::ofm_loss(p, &batch, &times, &opts).0
        };
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for j in 0..theta0.len() {
            let mut pj = psi.clone();
            let mut t = theta0.clone();
            t[j] += h;
            pj.set_params_flat(&t);
            let up = fd_loss(&pj);
            t[j] -= 2.0 * h;
            pj.set_params_flat(&t);
            let dn = fd_loss(&pj);
            let fd = (up - dn) / (2.0 * h);
            max_rel = max_rel.max((grad[j] - fd).abs() / (1.0 + fd.abs()));
        }
        cases.push(CheckCase {
            label: format!("gradcheck case {case} ({} params)", theta0.len()),
            residual: max_rel,
            tolerance: 1e-4,
        });
    }
    CheckReport { suite: "gradcheck".into(), cases }
}

// ---------------------------------------------------------------------
// Plots.
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKindArg {
    Scatter,
    Traj,
    Loss,
}

impl std::str::FromStr for PlotKindArg {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scatter" => Ok(PlotKindArg::Scatter),
            "traj" => Ok(PlotKindArg::Traj),
            "loss" => Ok(PlotKindArg::Loss),
            other => Err(Error::InvalidConfig {
                field: "kind".into(),
                message: format!("unknown plot kind `{other}`; expected scatter, traj or loss"),
            }),
        }
    }
}

/// Render a plot from a run directory (a checkpoint path is accepted and
/// resolved to its parent directory).
pub fn cmd_plot(target: &Path, kind: PlotKindArg, out: Option<&Path>) -> Result<PathBuf> {
    let run_dir = if target.is_dir() {
        target.to_path_buf()
    } else {
        target.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
    };
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("plots"));
    fs::create_dir_all(&out_dir)?;
    plot_into(&run_dir, &out_dir, kind)
}

fn plot_from_dir(run_dir: &Path, kind: PlotKindArg) -> Result<PathBuf> {
    let out_dir = run_dir.join("plots");
    fs::create_dir_all(&out_dir)?;
    plot_into(run_dir, &out_dir, kind)
}

fn plot_into(run_dir: &Path, out_dir: &Path, kind: PlotKindArg) -> Result<PathBuf> {
    match kind {
        PlotKindArg::Loss => {
            let rows = read_metrics_csv(&run_dir.join("metrics.csv"))?;
            let mut methods: Vec<String> = Vec::new();
            for r in &rows {
                if !methods.contains(&r.method) {
                    methods.push(r.method.clone());
                }
            }
            let series: Vec<LossSeries> = methods
                .iter()
                .map(|m| LossSeries {
                    method: m,
                    points: rows
                        .iter()
                        .filter(|r| &r.method == m)
                        .map(|r| (r.iteration as f64, r.loss))
                        .collect(),
                })
                .collect();
            let svg = loss_svg("training loss", &series);
            let path = out_dir.join("loss.svg");
            fs::write(&path, svg)?;
            Ok(path)
        }
        PlotKindArg::Scatter | PlotKindArg::Traj => {
            let cfg = ExperimentConfig::load(&run_dir.join("config.snapshot.toml"))?;
            let task = BenchmarkTask::from_descriptor(&cfg.task)?;
            if task.dim() != 2 {
                return Err(Error::PlotDimension {
                    kind: if kind == PlotKindArg::Scatter { "scatter" } else { "traj" }.into(),
                    dim: task.dim(),
                });
            }
            let ckpt = Checkpoint::load(&run_dir.join("checkpoint.json"))?;
            let mut rng = crate::rng(cfg.seed ^ 0x9107);
            let n = 400;
            let x0 = task.p0.sample(n, &mut rng);
            let x1 = task.p1.sample(n, &mut rng);

            let (pushed, paths) = transported_and_paths(&ckpt, &x0, kind)?;
            let mut layers = vec![
                ScatterLayer { id: "p0", points: &x0, color: "#9aa0a6", radius: 2.0, opacity: 0.65 },
                ScatterLayer { id: "pushforward", points: &pushed, color: "#d93025", radius: 2.0, opacity: 0.7 },
            ];
            if kind == PlotKindArg::Scatter {
                layers.insert(1, ScatterLayer { id: "p1", points: &x1, color: "#1a73e8", radius: 2.0, opacity: 0.5 });
            }
            let traj_layers: Vec<TrajectoryLayer> = if kind == PlotKindArg::Traj {
                vec![TrajectoryLayer { id: "trajectories", paths: &paths, color: "#188038", opacity: 0.35 }]
            } else {
                Vec::new()
            };
            let svg = scatter_svg(
                if kind == PlotKindArg::Traj { "map and trajectories" } else { "source, target, pushforward" },
                &layers,
                &traj_layers,
            );
            let path = out_dir.join(if kind == PlotKindArg::Traj { "trajectories.svg" } else { "scatter.svg" });
            fs::write(&path, svg)?;
            Ok(path)
        }
    }
}

fn transported_and_paths(
    ckpt: &Checkpoint,
    x0: &DMatrix<f64>,
    kind: PlotKindArg,
) -> Result<(DMatrix<f64>, Vec<Vec<DVector<f64>>>)> {
    use crate::config::ModelCheckpoint;
    let n = x0.nrows();
    let traj_count = 64.min(n);
    let traj_times: Vec<f64> = (0..=8).map(|k| k as f64 / 8.0).collect();
    match &ckpt.model {
        ModelCheckpoint::Icnn { .. } | ModelCheckpoint::MlpPotential { .. } | ModelCheckpoint::Quadratic { .. } => {
            let psi = ckpt.build_potential()?;
            let mut pushed = DMatrix::zeros(n, 2);
            for i in 0..n {
                pushed.row_mut(i).copy_from(&psi.grad(&x0.row(i).transpose()).transpose());
            }
            let paths = if kind == PlotKindArg::Traj {
                (0..traj_count)
                    .map(|i| {
                        let a = x0.row(i).transpose();
                        let b = pushed.row(i).transpose();
                        // Straight by construction: two endpoints suffice.
                        vec![a, b]
                    })
                    .collect()
            } else {
                Vec::new()
            };
            Ok((pushed, paths))
        }
        ModelCheckpoint::TimeField { .. } | ModelCheckpoint::ScalarTimeField { .. } => {
            let field: Box<dyn VelocityField> = match &ckpt.model {
                ModelCheckpoint::TimeField { .. } => Box::new(ckpt.build_time_field()?),
                _ => Box::new(ckpt.build_scalar_time_field()?),
            };
            let ode = OdeOptions::default();
            let mut pushed = DMatrix::zeros(n, 2);
            let mut paths = Vec::new();
            for i in 0..n {
                let z0 = x0.row(i).transpose();
                let path = integrate_path(|t, z| field.velocity(t, z), &z0, &traj_times, &ode)?;
                pushed.row_mut(i).copy_from(&path.last().expect("endpoint").transpose());
                if kind == PlotKindArg::Traj && i < traj_count {
                    paths.push(path);
                }
            }
            Ok((pushed, paths))
        }
    }
}
