//! Optimal flow matching training loop.
//!
//! One training step couples a fresh batch, interpolates, inverts the
//! flow map per item, and applies the explicit gradient: with everything
//! except ∇Ψ_θ(z₀) held constant,
//!
//! ```text
//! z₀ = (φ^Ψ_t)⁻¹(x_t)                       (inner solve, detached)
//! vᵢ = 2·(t∇²Ψ(z₀) + (1−t)I)⁻¹ (x₀−z₀)/t   (detached)
//! ∂L/∂θ = mean over batch of d/dθ ⟨vᵢ, ∇Ψ_θ(z₀)⟩
//! ```
//!
//! so a parameter update never differentiates through the inner solver.
//! Inference needs no ODE: the learned map is x ↦ ∇Ψ(x) and the induced
//! trajectories are straight lines by construction.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmark::BenchmarkTask;
use crate::error::{Error, Result};
use crate::inversion::{conjugate, invert_flow_map, SubproblemOptions};
use crate::optim::{Adam, EmaShadow};
use crate::plans::{sample_ground_truth_plan, sample_plan, PairedBatch, PlanKind};
use crate::potential::{Potential, TrainablePotential, DENSE_HESSIAN_LIMIT};
use rand::Rng;

/// How to apply the inverse of `t∇²Ψ + (1−t)I`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianSolve {
    /// Materialize the matrix and factorize (D ≤ dense limit).
    Dense,
    /// Matrix-free conjugate gradient on Hessian-vector products.
    ConjugateGradient,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub plan: PlanKind,
    /// Assignment chunk for the minibatch plans.
    pub mb_size: usize,
    pub subproblem: SubproblemOptions,
    pub hessian_solve: HessianSolve,
    pub seed: u64,
    pub log_interval: usize,
    /// Also estimate the dual OT loss at log points (one conjugate solve
    /// per batch item).
    pub log_dual_ot: bool,
    /// Abort when the subproblem failure fraction over this many recent
    /// iterations exceeds `abort_fail_rate`.
    pub abort_window: usize,
    pub abort_fail_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            batch_size: 256,
            learning_rate: 1e-3,
            ema_decay: 0.999,
            plan: PlanKind::Independent,
            mb_size: 64,
            subproblem: SubproblemOptions::default(),
            hessian_solve: HessianSolve::Dense,
            seed: 0,
            log_interval: 50,
            log_dual_ot: false,
            abort_window: 50,
            abort_fail_rate: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::InvalidConfig { field: field.into(), message })
        };
        if self.iterations == 0 && false {
            // 0 iterations is legal: the trainer returns the initial
            // potential unchanged.
        }
        if self.batch_size < 1 {
            return bad("train.batch_size", "must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("train.ema_decay", format!("{} outside [0, 1)", self.ema_decay));
        }
        let eps = self.subproblem.eps_t;
        if !(0.0 < eps && eps < 0.5) {
            return bad("subproblem.eps_t", format!("{eps} outside (0, 0.5)"));
        }
        if self.learning_rate <= 0.0 {
            return bad("train.learning_rate", "must be positive".into());
        }
        if self.log_interval == 0 {
            return bad("train.log_interval", "must be >= 1".into());
        }
        Ok(())
    }
}

/// Per-log-point diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: usize,
    /// Restoration-form loss estimate: mean ‖(z₀ − x₀)/t‖².
    pub ofm_loss: f64,
    /// The surrogate inner product mean ⟨vᵢ, ∇Ψ(z₀)⟩ whose θ-gradient is
    /// applied.
    pub surrogate: f64,
    /// Dual OT loss estimate E[Ψ(x₀)] + E[Ψ̄(x₁)], when requested.
    pub dual_ot_loss: Option<f64>,
    pub subopt_mean_iters: f64,
    pub subopt_failures: usize,
}

impl LossReport {
    pub fn trace_row(&self, method: &str) -> TraceRow {
        TraceRow {
            iteration: self.iteration,
            method: method.to_string(),
            loss: self.ofm_loss,
            dual_ot_loss: self.dual_ot_loss,
            subopt_mean_iters: Some(self.subopt_mean_iters),
            subopt_failures: Some(self.subopt_failures),
        }
    }
}

/// One metrics-trace line, shared across every trainer in the crate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub method: String,
    pub loss: f64,
    pub dual_ot_loss: Option<f64>,
    pub subopt_mean_iters: Option<f64>,
    pub subopt_failures: Option<usize>,
}

/// Optional callbacks during training.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub on_log: Option<&'a mut dyn FnMut(&TraceRow)>,
    /// Called every `checkpoint_interval` iterations with the EMA
    /// parameter vector.
    pub on_checkpoint: Option<&'a mut dyn FnMut(usize, &DVector<f64>)>,
    pub checkpoint_interval: usize,
}

/// One-step transport: the learned map is the potential gradient; the
/// trajectory at time t is the straight line (1−t)x₀ + t∇Ψ(x₀).
pub fn transport(psi: &dyn Potential, x0: &DVector<f64>) -> DVector<f64> {
    psi.grad(x0)
}

/// Diagnostic restoration loss (no parameter gradient): mean over the
/// batch of ‖(z₀ − x₀)/t‖². Returns the estimate and the count of items
/// whose inner solve did not reach tolerance.
pub fn ofm_loss(
    psi: &dyn Potential,
    batch: &PairedBatch,
    times: &[f64],
    opts: &SubproblemOptions,
) -> (f64, usize) {
    assert_eq!(batch.len(), times.len(), "one time per pair");
    let items: Vec<(f64, bool)> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let (x0, x1) = batch.pair(i);
            let t = opts.clamp_t(times[i]);
            let x_t = (1.0 - t) * &x0 + t * &x1;
            let inv = invert_flow_map(psi, &x_t, t, opts);
            (((inv.z0 - &x0) / t).norm_squared(), inv.converged)
        })
        .collect();
    let loss = items.iter().map(|(l, _)| l).sum::<f64>() / batch.len() as f64;
    let failures = items.iter().filter(|(_, ok)| !ok).count();
    (loss, failures)
}

/// Monte-Carlo estimate of the dual OT loss E[Ψ(x₀)] + E[Ψ̄(x₁)].
///
/// Items whose conjugate diverges are excluded; the second component
/// counts them.
pub fn dual_ot_loss(
    psi: &dyn Potential,
    batch: &PairedBatch,
    opts: &SubproblemOptions,
) -> (f64, usize) {
    let items: Vec<Option<f64>> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let (x0, x1) = batch.pair(i);
            match conjugate(psi, &x1, opts) {
                Ok(c) => Some(psi.eval(&x0) + c.value),
                Err(_) => None,
            }
        })
        .collect();
    let kept: Vec<f64> = items.into_iter().flatten().collect();
    let excluded = batch.len() - kept.len();
    let mean = if kept.is_empty() {
        f64::NAN
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    };
    (mean, excluded)
}

/// Squared field distance to a reference potential, evaluated with
/// common random numbers: OFM loss of Ψ minus OFM loss of Ψ* on the same
/// batch and times.
pub fn ofm_distance(
    psi: &dyn Potential,
    psi_star: &dyn Potential,
    batch: &PairedBatch,
    times: &[f64],
    opts: &SubproblemOptions,
) -> f64 {
    let (a, _) = ofm_loss(psi, batch, times, opts);
    let (b, _) = ofm_loss(psi_star, batch, times, opts);
    a - b
}

struct ItemOut {
    grad: DVector<f64>,
    loss: f64,
    surrogate: f64,
    iters: usize,
    converged: bool,
}

/// Apply `(t∇²Ψ(z₀) + (1−t)I)⁻¹ b`.
fn solve_shifted_hessian(
    psi: &dyn Potential,
    z0: &DVector<f64>,
    t: f64,
    b: &DVector<f64>,
    mode: HessianSolve,
) -> Result<DVector<f64>> {
    match mode {
        HessianSolve::Dense => {
            let mut h = psi.hessian(z0)? * t;
            for i in 0..h.nrows() {
                h[(i, i)] += 1.0 - t;
            }
            // SPD by construction: the matrix dominates (1−t)I for t < 1.
            let chol = h.cholesky().ok_or_else(|| {
                Error::TrainingAborted(format!(
                    "shifted Hessian not positive-definite at t={t:.4}"
                ))
            })?;
            Ok(chol.solve(b))
        }
        HessianSolve::ConjugateGradient => {
            Ok(conjugate_gradient(|w| psi.hvp(z0, w) * t + w * (1.0 - t), b, 1e-12, 10 * b.len().max(50)))
        }
    }
}

/// Plain CG for SPD operators.
fn conjugate_gradient<F>(matvec: F, b: &DVector<f64>, rel_tol: f64, max_iter: usize) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut x = DVector::zeros(b.len());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.norm_squared();
    let threshold = rel_tol * rel_tol * rs.max(1e-300);
    for _ in 0..max_iter {
        if rs <= threshold {
            break;
        }
        let ap = matvec(&p);
        let alpha = rs / p.dot(&ap);
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rs_new = r.norm_squared();
        p = &r + &p * (rs_new / rs);
        rs = rs_new;
    }
    x
}

/// One optimizer step of the explicit-gradient scheme. Returns the
/// report built from the same inner solves.
pub fn ofm_grad_step<P: TrainablePotential>(
    psi: &mut P,
    batch: &PairedBatch,
    times: &[f64],
    cfg: &TrainConfig,
    adam: &mut Adam,
    ema: &mut EmaShadow,
    iteration: usize,
) -> Result<LossReport> {
    assert_eq!(batch.len(), times.len(), "one time per pair");
    let items: Vec<Result<ItemOut>> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let (x0, x1) = batch.pair(i);
            let t = cfg.subproblem.clamp_t(times[i]);
            let x_t = (1.0 - t) * &x0 + t * &x1;
            let inv = invert_flow_map(psi, &x_t, t, &cfg.subproblem);
            let rhs = (&x0 - &inv.z0) * (2.0 / t);
            let v = solve_shifted_hessian(psi, &inv.z0, t, &rhs, cfg.hessian_solve)?;
            let grad = psi.param_grad_directional(&inv.z0, &v);
            let surrogate = psi.eval_tangent(&inv.z0, &v).tangent;
            Ok(ItemOut {
                grad,
                loss: ((&inv.z0 - &x0) / t).norm_squared(),
                surrogate,
                iters: inv.iterations,
                converged: inv.converged,
            })
        })
        .collect();

    let b = batch.len() as f64;
    let mut grad = DVector::zeros(psi.param_count());
    let mut loss = 0.0;
    let mut surrogate = 0.0;
    let mut iters = 0usize;
    let mut failures = 0usize;
    for item in items {
        let item = item?;
        grad.axpy(1.0 / b, &item.grad, 1.0);
        loss += item.loss / b;
        surrogate += item.surrogate / b;
        iters += item.iters;
        failures += usize::from(!item.converged);
    }

    let mut theta = psi.params_flat();
    adam.step(&mut theta, &grad);
    psi.set_params_flat(&theta);
    psi.project_convex();
    ema.update(&psi.params_flat());

    Ok(LossReport {
        iteration,
        ofm_loss: loss,
        surrogate,
        dual_ot_loss: None,
        subopt_mean_iters: iters as f64 / b,
        subopt_failures: failures,
    })
}

/// Run the full training loop on a task; returns the EMA-weighted
/// potential (used for evaluation) and the metric trace.
pub fn train<P: TrainablePotential + Clone>(
    mut psi: P,
    cfg: &TrainConfig,
    task: &BenchmarkTask,
    hooks: &mut TrainHooks<'_>,
) -> Result<(P, Vec<TraceRow>)> {
    cfg.validate()?;
    if cfg.hessian_solve == HessianSolve::Dense && psi.dim() > DENSE_HESSIAN_LIMIT {
        return Err(Error::InvalidConfig {
            field: "train.hessian_solve".into(),
            message: format!(
                "dense solve for dim {} exceeds limit {DENSE_HESSIAN_LIMIT}; use conjugate-gradient",
                psi.dim()
            ),
        });
    }
    let mut rng = crate::rng(cfg.seed);
    let mut adam = Adam::new(psi.param_count(), cfg.learning_rate);
    let mut ema = EmaShadow::new(psi.params_flat(), cfg.ema_decay);
    let mut trace = Vec::new();
    let mut fail_window: Vec<f64> = Vec::with_capacity(cfg.abort_window);

    for k in 0..cfg.iterations {
        let batch = match cfg.plan {
            PlanKind::GroundTruth => {
                let map = task.ground_truth.as_ref().ok_or_else(|| Error::InvalidConfig {
                    field: "train.plan".into(),
                    message: "ground-truth plan needs a task with a known map".into(),
                })?;
                sample_ground_truth_plan(&task.p0, map.as_ref(), cfg.batch_size, &mut rng)
            }
            plan => sample_plan(&task.p0, &task.p1, plan, cfg.batch_size, cfg.mb_size, &mut rng)?,
        };
        let eps = cfg.subproblem.eps_t;
        let times: Vec<f64> =
            (0..batch.len()).map(|_| rng.gen_range(eps..1.0 - eps)).collect();

        let mut report = ofm_grad_step(&mut psi, &batch, &times, cfg, &mut adam, &mut ema, k + 1)?;

        let frac = report.subopt_failures as f64 / batch.len() as f64;
        if fail_window.len() == cfg.abort_window {
            fail_window.remove(0);
        }
        fail_window.push(frac);
        if fail_window.len() == cfg.abort_window {
            let mean = fail_window.iter().sum::<f64>() / cfg.abort_window as f64;
            if mean > cfg.abort_fail_rate {
                return Err(Error::TrainingAborted(format!(
                    "subproblem non-convergence rate {:.1}% over the last {} iterations",
                    100.0 * mean,
                    cfg.abort_window
                )));
            }
        }

        if (k + 1) % cfg.log_interval == 0 || k + 1 == cfg.iterations {
            if cfg.log_dual_ot {
                let (dual, _) = dual_ot_loss(&psi, &batch, &cfg.subproblem);
                report.dual_ot_loss = Some(dual);
            }
            let row = report.trace_row("ofm");
            if let Some(log) = hooks.on_log.as_mut() {
                log(&row);
            }
            trace.push(row);
        }
        if hooks.checkpoint_interval > 0 && (k + 1) % hooks.checkpoint_interval == 0 {
            if let Some(ckpt) = hooks.on_checkpoint.as_mut() {
                ckpt(k + 1, ema.shadow());
            }
        }
    }

    let mut ema_psi = psi.clone();
    ema_psi.set_params_flat(ema.shadow());
    ema_psi.project_convex();
    Ok((ema_psi, trace))
}
