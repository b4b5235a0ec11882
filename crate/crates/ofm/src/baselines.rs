//! Baseline flow-matching trainers and trajectory diagnostics.
//!
//! Vanilla flow matching regresses a time-conditioned field onto
//! interpolation directions x₁ − x₀; running it over minibatch-OT
//! couplings gives OT-CFM. Rectified flow re-pairs samples through the
//! previous flow's endpoints and re-trains; its potential-field variant
//! (for the quadratic cost) restricts the field to x-gradients of a
//! scalar network. All of these need an ODE solve at inference, unlike
//! the convex-potential trainer.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::{invert_flow_map, SubproblemOptions};
use crate::net::{mlp, Activation, Stack};
use crate::ode::{integrate, integrate_path, OdeOptions};
use crate::optim::{Adam, RmsProp};
use crate::plans::{sample_plan, Distribution, PairedBatch, PlanKind};
use crate::potential::Potential;
use crate::trainer::TraceRow;

/// A time-dependent velocity field u_t(x).
pub trait VelocityField: Send + Sync {
    fn dim(&self) -> usize;
    fn velocity(&self, t: f64, x: &DVector<f64>) -> DVector<f64>;
}

/// A field with trainable parameters and a per-item loss gradient.
pub trait TrainableField: VelocityField {
    fn param_count(&self) -> usize;
    fn params_flat(&self) -> DVector<f64>;
    fn set_params_flat(&mut self, theta: &DVector<f64>);
    /// Loss ‖u_t(x) − target‖² and its parameter gradient for one item.
    fn fm_item_grad(&self, t: f64, x: &DVector<f64>, target: &DVector<f64>)
        -> (f64, DVector<f64>);
}

fn with_time(x: &DVector<f64>, t: f64) -> DVector<f64> {
    let mut input = x.as_slice().to_vec();
    input.push(t);
    DVector::from_vec(input)
}

/// Unconstrained feed-forward field u_θ: R^D × [0,1] → R^D; time enters
/// as one extra input coordinate.
#[derive(Debug, Clone)]
pub struct TimeField {
    stack: Stack,
    dim: usize,
    hidden: Vec<usize>,
    act: Activation,
}

impl TimeField {
    pub fn new<R: Rng>(dim: usize, hidden: &[usize], act: Activation, rng: &mut R) -> Self {
        let mut dims = vec![dim + 1];
        dims.extend_from_slice(hidden);
        dims.push(dim);
        TimeField { stack: mlp(&dims, act, rng), dim, hidden: hidden.to_vec(), act }
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn activation(&self) -> Activation {
        self.act
    }
}

impl VelocityField for TimeField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        self.stack.forward(&with_time(x, t))
    }
}

impl TrainableField for TimeField {
    fn param_count(&self) -> usize {
        self.stack.param_count()
    }

    fn params_flat(&self) -> DVector<f64> {
        self.stack.params_flat()
    }

    fn set_params_flat(&mut self, theta: &DVector<f64>) {
        self.stack.set_params_flat(theta);
    }

    fn fm_item_grad(
        &self,
        t: f64,
        x: &DVector<f64>,
        target: &DVector<f64>,
    ) -> (f64, DVector<f64>) {
        let fwd = self.stack.forward_full(&with_time(x, t));
        let resid = fwd.output() - target;
        let (grads, _) = self.stack.vjp(&fwd, &(&resid * 2.0));
        (resid.norm_squared(), grads.flat())
    }
}

/// Potential-field variant: a scalar network f_θ: R^D × [0,1] → R whose
/// x-gradient is the velocity, u_t(x) = ∇_x f_θ(x, t). Curl-free at
/// every t by construction.
#[derive(Debug, Clone)]
pub struct ScalarTimeField {
    stack: Stack,
    dim: usize,
    hidden: Vec<usize>,
    act: Activation,
}

impl ScalarTimeField {
    pub fn new<R: Rng>(dim: usize, hidden: &[usize], act: Activation, rng: &mut R) -> Self {
        let mut dims = vec![dim + 1];
        dims.extend_from_slice(hidden);
        dims.push(1);
        ScalarTimeField { stack: mlp(&dims, act, rng), dim, hidden: hidden.to_vec(), act }
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn activation(&self) -> Activation {
        self.act
    }
}

impl VelocityField for ScalarTimeField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        let g = self.stack.grad_input(&with_time(x, t));
        g.rows(0, self.dim).into_owned()
    }
}

impl TrainableField for ScalarTimeField {
    fn param_count(&self) -> usize {
        self.stack.param_count()
    }

    fn params_flat(&self) -> DVector<f64> {
        self.stack.params_flat()
    }

    fn set_params_flat(&mut self, theta: &DVector<f64>) {
        self.stack.set_params_flat(theta);
    }

    fn fm_item_grad(
        &self,
        t: f64,
        x: &DVector<f64>,
        target: &DVector<f64>,
    ) -> (f64, DVector<f64>) {
        // d/dθ ‖∇ₓf − y‖² = d/dθ ⟨2(∇ₓf − y) held constant, ∇ₓf⟩: one
        // tangent pass seeded with the residual (zero time component),
        // then the reverse sweep of the tangent output.
        let input = with_time(x, t);
        let u = {
            let g = self.stack.grad_input(&input);
            g.rows(0, self.dim).into_owned()
        };
        let resid = &u - target;
        let mut seed = (&resid * 2.0).as_slice().to_vec();
        seed.push(0.0);
        let tp = self.stack.forward_tangent(&input, &DVector::from_vec(seed));
        let (grads, _) = self.stack.tangent_vjp(&tp);
        (resid.norm_squared(), grads.flat())
    }
}

/// The optimal field induced by a convex potential, exposed through the
/// common field interface: u_t(x) = ∇Ψ(z₀) − z₀ with z₀ the inverted
/// flow map. Lets the ODE route be cross-checked against one-step
/// transport.
pub struct PotentialField<'a> {
    pub psi: &'a dyn Potential,
    pub opts: SubproblemOptions,
}

impl VelocityField for PotentialField<'_> {
    fn dim(&self) -> usize {
        self.psi.dim()
    }

    fn velocity(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        let z0 = invert_flow_map(self.psi, x, t, &self.opts).z0;
        self.psi.grad(&z0) - z0
    }
}

/// Mean ‖u_t(x_t) − (x₁−x₀)‖² at x_t = (1−t)x₀ + t·x₁.
pub fn fm_loss(field: &dyn VelocityField, batch: &PairedBatch, times: &[f64]) -> f64 {
    assert_eq!(batch.len(), times.len(), "one time per pair");
    let total: f64 = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let (x0, x1) = batch.pair(i);
            let t = times[i];
            let x_t = (1.0 - t) * &x0 + t * &x1;
            (field.velocity(t, &x_t) - (x1 - x0)).norm_squared()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    total / batch.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldOptimizer {
    RmsProp,
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FmTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: FieldOptimizer,
    pub plan: PlanKind,
    pub mb_size: usize,
    pub seed: u64,
    pub log_interval: usize,
}

impl Default for FmTrainConfig {
    fn default() -> Self {
        FmTrainConfig {
            iterations: 2000,
            batch_size: 256,
            learning_rate: 1e-3,
            optimizer: FieldOptimizer::RmsProp,
            plan: PlanKind::Independent,
            mb_size: 64,
            seed: 0,
            log_interval: 50,
        }
    }
}

/// Pre-integrated coupling pool; rectified-flow rounds train on batches
/// drawn from it.
pub struct CouplingPool {
    pub x0: DMatrix<f64>,
    pub x1: DMatrix<f64>,
}

impl CouplingPool {
    pub fn len(&self) -> usize {
        self.x0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.nrows() == 0
    }

    pub fn transport_cost(&self) -> f64 {
        let n = self.len() as f64;
        (0..self.len())
            .map(|i| 0.5 * (self.x1.row(i) - self.x0.row(i)).norm_squared())
            .sum::<f64>()
            / n
    }

    fn sample_batch<R: Rng>(&self, n: usize, rng: &mut R) -> PairedBatch {
        let d = self.x0.ncols();
        let mut x0 = DMatrix::zeros(n, d);
        let mut x1 = DMatrix::zeros(n, d);
        for i in 0..n {
            let j = rng.gen_range(0..self.len());
            x0.row_mut(i).copy_from(&self.x0.row(j));
            x1.row_mut(i).copy_from(&self.x1.row(j));
        }
        PairedBatch { x0, x1, provenance: PlanKind::GroundTruth }
    }
}

/// Where training batches come from: fresh marginal samples under a
/// plan, or a fixed coupling pool.
pub enum PlanSource<'a> {
    Marginals { p0: &'a Distribution, p1: &'a Distribution },
    Pool(&'a CouplingPool),
}

/// Stochastic minimization of the flow-matching loss. Returns the trace;
/// the field is trained in place.
pub fn train_fm<F: TrainableField>(
    field: &mut F,
    cfg: &FmTrainConfig,
    source: &PlanSource<'_>,
    method: &str,
) -> Result<Vec<TraceRow>> {
    let mut rng = crate::rng(cfg.seed);
    let mut theta = field.params_flat();
    let mut rms = RmsProp::new(theta.len(), cfg.learning_rate);
    let mut adam = Adam::new(theta.len(), cfg.learning_rate);
    let mut trace = Vec::new();

    for k in 0..cfg.iterations {
        let batch = match source {
            PlanSource::Marginals { p0, p1 } => {
                sample_plan(p0, p1, cfg.plan, cfg.batch_size, cfg.mb_size, &mut rng)?
            }
            PlanSource::Pool(pool) => pool.sample_batch(cfg.batch_size, &mut rng),
        };
        let times: Vec<f64> = (0..batch.len()).map(|_| rng.gen_range(0.0..1.0)).collect();

        let items: Vec<(f64, DVector<f64>)> = (0..batch.len())
            .into_par_iter()
            .map(|i| {
                let (x0, x1) = batch.pair(i);
                let t = times[i];
                let x_t = (1.0 - t) * &x0 + t * &x1;
                field.fm_item_grad(t, &x_t, &(x1 - x0))
            })
            .collect();

        let b = batch.len() as f64;
        let mut grad = DVector::zeros(theta.len());
        let mut loss = 0.0;
        for (l, g) in items {
            loss += l / b;
            grad.axpy(1.0 / b, &g, 1.0);
        }
        match cfg.optimizer {
            FieldOptimizer::RmsProp => rms.step(&mut theta, &grad),
            FieldOptimizer::Adam => adam.step(&mut theta, &grad),
        }
        field.set_params_flat(&theta);

        if (k + 1) % cfg.log_interval == 0 || k + 1 == cfg.iterations {
            trace.push(TraceRow {
                iteration: k + 1,
                method: method.to_string(),
                loss,
                dual_ot_loss: None,
                subopt_mean_iters: None,
                subopt_failures: None,
            });
        }
    }
    Ok(trace)
}

/// Outcome of one rectified-flow round.
pub struct RectifyOutcome<F> {
    pub field: F,
    pub pool: CouplingPool,
    pub integration_failures: usize,
    pub trace: Vec<TraceRow>,
}

/// One rectification round: push fresh p₀ samples through the previous
/// field to build the re-paired plan (id, φ₁)#p₀, then train a fresh
/// field on it. Samples whose integration fails are counted and dropped.
pub fn rectify_round<F, G>(
    prev: &dyn VelocityField,
    fresh: G,
    cfg: &FmTrainConfig,
    p0: &Distribution,
    pool_size: usize,
    ode: &OdeOptions,
    method: &str,
) -> Result<RectifyOutcome<F>>
where
    F: TrainableField,
    G: FnOnce(&mut crate::Rng) -> F,
{
    let mut rng = crate::rng(cfg.seed ^ 0x5eed_9d1e);
    let x0 = p0.sample(pool_size, &mut rng);
    let endpoints: Vec<Result<DVector<f64>>> = (0..pool_size)
        .into_par_iter()
        .map(|i| integrate(|t, x| prev.velocity(t, x), &x0.row(i).transpose(), ode))
        .collect();

    let mut kept_x0 = Vec::new();
    let mut kept_x1 = Vec::new();
    let mut failures = 0usize;
    for (i, end) in endpoints.into_iter().enumerate() {
        match end {
            Ok(z1) => {
                kept_x0.push(x0.row(i).transpose());
                kept_x1.push(z1);
            }
            Err(_) => failures += 1,
        }
    }
    if kept_x0.is_empty() {
        return Err(Error::TrainingAborted("every trajectory integration failed".into()));
    }
    let d = x0.ncols();
    let pool = CouplingPool {
        x0: DMatrix::from_fn(kept_x0.len(), d, |i, j| kept_x0[i][j]),
        x1: DMatrix::from_fn(kept_x1.len(), d, |i, j| kept_x1[i][j]),
    };

    let mut field = fresh(&mut rng);
    let trace = train_fm(&mut field, cfg, &PlanSource::Pool(&pool), method)?;
    Ok(RectifyOutcome { field, pool, integration_failures: failures, trace })
}

/// Relative trajectory deviation from the chord, averaged over 16
/// interior uniform times and over samples:
/// mean ‖z_t − ((1−t)z₀ + t·z₁)‖² / ‖z₁ − z₀‖². Samples with degenerate
/// chords are skipped.
pub fn straightness(
    field: &dyn VelocityField,
    x0s: &DMatrix<f64>,
    ode: &OdeOptions,
) -> Result<f64> {
    const TIMES: usize = 16;
    let mut times: Vec<f64> = (1..=TIMES).map(|k| k as f64 / (TIMES + 1) as f64).collect();
    times.push(1.0);

    let per_sample: Vec<Result<Option<f64>>> = (0..x0s.nrows())
        .into_par_iter()
        .map(|i| {
            let z0 = x0s.row(i).transpose();
            let path = integrate_path(|t, x| field.velocity(t, x), &z0, &times, ode)?;
            let z1 = path.last().expect("endpoint");
            let chord = (z1 - &z0).norm_squared();
            if chord < 1e-12 {
                return Ok(None);
            }
            let dev = times[..TIMES]
                .iter()
                .zip(&path)
                .map(|(&t, z_t)| (z_t - ((1.0 - t) * &z0 + t * z1)).norm_squared())
                .sum::<f64>()
                / TIMES as f64;
            Ok(Some(dev / chord))
        })
        .collect();

    let mut acc = 0.0;
    let mut count = 0usize;
    for s in per_sample {
        if let Some(v) = s? {
            acc += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("all chords degenerate in straightness".into()));
    }
    Ok(acc / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plans::{pair_independent, Gaussian};
    use crate::rng;
    use nalgebra::dvector;

    fn zeroed<F: TrainableField>(mut f: F) -> F {
        let n = f.param_count();
        f.set_params_flat(&DVector::zeros(n));
        f
    }

    /// Field configured to output a constant c: zero weights, output bias c.
    fn constant_field(c: &DVector<f64>, seed: u64) -> TimeField {
        let mut r = rng(seed);
        let mut f = TimeField::new(c.len(), &[4], Activation::Relu, &mut r);
        let n = f.param_count();
        let mut theta = DVector::zeros(n);
        // Output layer bias occupies the trailing entries.
        for (i, v) in c.iter().enumerate() {
            theta[n - c.len() + i] = *v;
        }
        f.set_params_flat(&theta);
        f
    }

    fn random_batch(d: usize, n: usize, seed: u64) -> (PairedBatch, Vec<f64>) {
        let mut r = rng(seed);
        let p = Distribution::Gaussian(Gaussian::standard(d));
        let b = pair_independent(p.sample(n, &mut r), p.sample(n, &mut r)).unwrap();
        let times = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        (b, times)
    }

    #[test]
    fn fm_loss_zero_field_cases() {
        let mut r = rng(1);
        let f = zeroed(TimeField::new(2, &[4], Activation::Relu, &mut r));
        // x1 = x0 ⇒ targets vanish ⇒ loss 0.
        let p = Distribution::Gaussian(Gaussian::standard(2));
        let x = p.sample(8, &mut r);
        let same = PairedBatch { x0: x.clone(), x1: x, provenance: PlanKind::Independent };
        let times: Vec<f64> = (0..8).map(|_| r.gen_range(0.0..1.0)).collect();
        assert_eq!(fm_loss(&f, &same, &times), 0.0);

        // Generic batch: loss is mean ‖x1−x0‖².
        let (batch, times) = random_batch(2, 32, 2);
        let expect: f64 = (0..batch.len())
            .map(|i| {
                let (x0, x1) = batch.pair(i);
                (x1 - x0).norm_squared()
            })
            .sum::<f64>()
            / batch.len() as f64;
        assert!((fm_loss(&f, &batch, &times) - expect).abs() < 1e-12);
    }

    #[test]
    fn fm_loss_constant_field_is_time_independent() {
        let c = dvector![0.5, -0.2];
        let f = constant_field(&c, 3);
        let x0 = DMatrix::from_row_slice(1, 2, &[0.1, 0.4]);
        let x1 = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let batch = PairedBatch { x0, x1, provenance: PlanKind::Independent };
        let expect = (&c - dvector![0.9, -1.4]).norm_squared();
        for t in [0.0, 0.3, 0.8, 1.0] {
            assert!((fm_loss(&f, &batch, &[t]) - expect).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn time_field_grad_matches_finite_differences() {
        let mut r = rng(4);
        let f = TimeField::new(2, &[5], Activation::Softplus, &mut r);
        let x = dvector![0.3, -0.6];
        let y = dvector![0.9, 0.1];
        let (_, g) = f.fm_item_grad(0.4, &x, &y);
        let theta = f.params_flat();
        let h = 1e-6;
        for i in 0..theta.len() {
            let mut fc = f.clone();
            let mut tp = theta.clone();
            tp[i] += h;
            fc.set_params_flat(&tp);
            let up = (fc.velocity(0.4, &x) - &y).norm_squared();
            tp[i] -= 2.0 * h;
            fc.set_params_flat(&tp);
            let dn = (fc.velocity(0.4, &x) - &y).norm_squared();
            let fd = (up - dn) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}");
        }
    }

    #[test]
    fn scalar_field_grad_matches_finite_differences() {
        let mut r = rng(5);
        let f = ScalarTimeField::new(2, &[5], Activation::Softplus, &mut r);
        let x = dvector![0.2, 0.7];
        let y = dvector![-0.4, 0.3];
        let (_, g) = f.fm_item_grad(0.6, &x, &y);
        let theta = f.params_flat();
        let h = 1e-6;
        for i in 0..theta.len() {
            let mut fc = f.clone();
            let mut tp = theta.clone();
            tp[i] += h;
            fc.set_params_flat(&tp);
            let up = (fc.velocity(0.6, &x) - &y).norm_squared();
            tp[i] -= 2.0 * h;
            fc.set_params_flat(&tp);
            let dn = (fc.velocity(0.6, &x) - &y).norm_squared();
            let fd = (up - dn) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}");
        }
    }

    #[test]
    fn scalar_field_jacobian_is_symmetric() {
        // Curl-free by construction: the field Jacobian is the Hessian of
        // the scalar net in x, so finite differences must be symmetric.
        let mut r = rng(6);
        let f = ScalarTimeField::new(3, &[8, 6], Activation::Softplus, &mut r);
        let x = dvector![0.4, -0.2, 0.9];
        let h = 1e-5;
        let mut jac = DMatrix::zeros(3, 3);
        for j in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let col = (f.velocity(0.3, &xp) - f.velocity(0.3, &xm)) / (2.0 * h);
            jac.set_column(j, &col);
        }
        assert!((&jac - jac.transpose()).abs().max() < 1e-6);
    }

    #[test]
    fn train_fm_zero_iterations_keeps_field() {
        let mut r = rng(7);
        let mut f = TimeField::new(1, &[4], Activation::Relu, &mut r);
        let before = f.params_flat();
        let p = Distribution::Gaussian(Gaussian::standard(1));
        let cfg = FmTrainConfig { iterations: 0, ..Default::default() };
        let trace =
            train_fm(&mut f, &cfg, &PlanSource::Marginals { p0: &p, p1: &p }, "fm").unwrap();
        assert!(trace.is_empty());
        assert_eq!(f.params_flat(), before);
    }

    #[test]
    fn train_fm_learns_one_d_shift() {
        // N(0,1) → N(2,1): the integrated map must shift the mean by ~2.
        let mut r = rng(8);
        let mut f = TimeField::new(1, &[32, 32], Activation::Relu, &mut r);
        let p0 = Distribution::Gaussian(Gaussian::standard(1));
        let p1 = Distribution::Gaussian(
            Gaussian::new(dvector![2.0], DMatrix::identity(1, 1)).unwrap(),
        );
        let cfg = FmTrainConfig {
            iterations: 1200,
            batch_size: 128,
            learning_rate: 1e-3,
            seed: 8,
            ..Default::default()
        };
        train_fm(&mut f, &cfg, &PlanSource::Marginals { p0: &p0, p1: &p1 }, "fm").unwrap();

        let mut r2 = rng(9);
        let xs = p0.sample(512, &mut r2);
        let ode = OdeOptions::DormandPrince45 { abs_tol: 1e-6, rel_tol: 1e-6 };
        let mut shift = 0.0;
        for i in 0..xs.nrows() {
            let z0 = xs.row(i).transpose();
            let z1 = integrate(|t, x| f.velocity(t, x), &z0, &ode).unwrap();
            shift += (z1[0] - z0[0]) / xs.nrows() as f64;
        }
        assert!((shift - 2.0).abs() / 2.0 < 0.05, "shift {shift}");
    }

    #[test]
    fn otcfm_is_fm_with_minibatch_plan() {
        // Identical code path; only the coupling tag differs.
        let p0 = Distribution::Gaussian(Gaussian::standard(2));
        let p1 = Distribution::eight_gaussians(4.0, 0.3);
        let mut r = rng(10);
        let b = sample_plan(&p0, &p1, PlanKind::Minibatch, 16, 8, &mut r).unwrap();
        assert_eq!(b.provenance, PlanKind::Minibatch);
        let cfg = FmTrainConfig {
            iterations: 3,
            batch_size: 8,
            plan: PlanKind::Minibatch,
            mb_size: 8,
            ..Default::default()
        };
        let mut f = TimeField::new(2, &[4], Activation::Relu, &mut rng(11));
        let trace =
            train_fm(&mut f, &cfg, &PlanSource::Marginals { p0: &p0, p1: &p1 }, "otcfm").unwrap();
        assert_eq!(trace.last().unwrap().method, "otcfm");
    }

    #[test]
    fn straightness_of_constant_field_is_zero() {
        let c = dvector![1.0, 0.5];
        let f = constant_field(&c, 12);
        let mut r = rng(13);
        let p = Distribution::Gaussian(Gaussian::standard(2));
        let x0 = p.sample(16, &mut r);
        let s = straightness(&f, &x0, &OdeOptions::default()).unwrap();
        assert!(s < 1e-12, "straightness {s}");
    }

    #[test]
    fn straightness_of_rotation_matches_arc_oracle() {
        // u(x) = Rx with R the 90° rotation generator: trajectories are
        // unit-speed circular arcs z_t = rot(t)·z0. The deviation from
        // the chord is computable in closed form.
        struct Rot;
        impl VelocityField for Rot {
            fn dim(&self) -> usize {
                2
            }
            fn velocity(&self, _t: f64, x: &DVector<f64>) -> DVector<f64> {
                dvector![-x[1], x[0]]
            }
        }
        let rot = |t: f64, z: &DVector<f64>| {
            dvector![t.cos() * z[0] - t.sin() * z[1], t.sin() * z[0] + t.cos() * z[1]]
        };
        let mut r = rng(14);
        let p = Distribution::Gaussian(Gaussian::standard(2));
        let x0 = p.sample(8, &mut r);

        let mut oracle = 0.0;
        for i in 0..x0.nrows() {
            let z0 = x0.row(i).transpose();
            let z1 = rot(1.0, &z0);
            let chord = (&z1 - &z0).norm_squared();
            let dev: f64 = (1..=16)
                .map(|k| {
                    let t = k as f64 / 17.0;
                    (rot(t, &z0) - ((1.0 - t) * &z0 + t * &z1)).norm_squared()
                })
                .sum::<f64>()
                / 16.0;
            oracle += dev / chord / x0.nrows() as f64;
        }
        let s = straightness(
            &Rot,
            &x0,
            &OdeOptions::DormandPrince45 { abs_tol: 1e-8, rel_tol: 1e-8 },
        )
        .unwrap();
        assert!(s > 0.0);
        assert!((s - oracle).abs() / oracle < 0.05, "{s} vs {oracle}");
    }

    #[test]
    fn straightness_skips_degenerate_chords() {
        let f = constant_field(&dvector![0.0, 0.0], 15);
        let x0 = DMatrix::zeros(4, 2);
        // Fixed points everywhere: chords all degenerate.
        assert!(matches!(
            straightness(&f, &x0, &OdeOptions::default()),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn rectify_round_fixed_point_for_straight_field() {
        // A constant field is already straight: the new pool reproduces
        // the same coupling cost and a fresh field refits it quickly.
        let c = dvector![1.5, -0.5];
        let f = constant_field(&c, 16);
        let p0 = Distribution::Gaussian(Gaussian::standard(2));
        let cfg = FmTrainConfig {
            iterations: 600,
            batch_size: 64,
            learning_rate: 2e-3,
            seed: 17,
            ..Default::default()
        };
        let out: RectifyOutcome<TimeField> = rectify_round(
            &f,
            |r| TimeField::new(2, &[16, 16], Activation::Relu, r),
            &cfg,
            &p0,
            512,
            &OdeOptions::default(),
            "rf",
        )
        .unwrap();
        assert_eq!(out.integration_failures, 0);
        // Pool coupling is x1 = x0 + c: cost ½‖c‖².
        assert!((out.pool.transport_cost() - 0.5 * c.norm_squared()).abs() < 1e-9);
        // The refit field reaches a small loss on the straight coupling.
        assert!(out.trace.last().unwrap().loss < 0.05);
    }

    #[test]
    fn rectify_round_cost_does_not_increase() {
        // Train a quick FM field, then one rectification round; Monte
        // Carlo transport cost must not increase beyond 3 standard
        // errors.
        let p0 = Distribution::Gaussian(Gaussian::standard(2));
        let p1 = Distribution::Gaussian(
            Gaussian::new(dvector![1.5, -1.0], DMatrix::identity(2, 2)).unwrap(),
        );
        let mut f = TimeField::new(2, &[24, 24], Activation::Relu, &mut rng(18));
        let cfg = FmTrainConfig {
            iterations: 800,
            batch_size: 128,
            learning_rate: 2e-3,
            seed: 19,
            ..Default::default()
        };
        train_fm(&mut f, &cfg, &PlanSource::Marginals { p0: &p0, p1: &p1 }, "fm").unwrap();

        let pool_size = 1024;
        let out: RectifyOutcome<TimeField> = rectify_round(
            &f,
            |r| TimeField::new(2, &[24, 24], Activation::Relu, r),
            &cfg,
            &p0,
            pool_size,
            &OdeOptions::default(),
            "rf",
        )
        .unwrap();
        // Cost of the rectified plan (pool) vs the initial independent
        // plan on fresh samples.
        let mut r = rng(20);
        let ind = pair_independent(
            p0.sample(pool_size, &mut r),
            p1.sample(pool_size, &mut r),
        )
        .unwrap();
        let costs_ind: Vec<f64> = (0..pool_size)
            .map(|i| 0.5 * (ind.x1.row(i) - ind.x0.row(i)).norm_squared())
            .collect();
        let mean_ind = costs_ind.iter().sum::<f64>() / pool_size as f64;
        let var_ind = costs_ind.iter().map(|c| (c - mean_ind).powi(2)).sum::<f64>()
            / (pool_size as f64 - 1.0);
        let se = (var_ind / pool_size as f64).sqrt();
        assert!(
            out.pool.transport_cost() <= mean_ind + 3.0 * se,
            "pool {} vs independent {mean_ind} (se {se})",
            out.pool.transport_cost()
        );
    }

    use rand::Rng as _;
}
