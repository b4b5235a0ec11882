//! Ground-truth benchmark tasks and evaluation metrics.
//!
//! The gradient of any convex function transports a source distribution
//! optimally (for the quadratic cost) onto its own pushforward, so tasks
//! with exactly known optimal maps can be manufactured: fix a convex Ψ*,
//! set p₁ := ∇Ψ*#p₀, and T* = ∇Ψ* is the unique optimal map. Two
//! families are provided — affine maps between Gaussians and
//! softplus-ridge perturbations of the identity — plus the L²-UVP and
//! cosine metrics and the time-integral identity check.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::{conjugate, invert_flow_map, SubproblemOptions};
use crate::plans::{sample_covariance, Distribution, Gaussian, MapSpec};
use crate::potential::{Potential, QuadraticPotential};

/// Default evaluation sample count for the metrics.
pub const EVAL_SAMPLES: usize = 1 << 14;

/// Ψ(x) = ½‖x‖² + Σₖ aₖ·softplus(⟨wₖ,x⟩ + cₖ) with aₖ ≥ 0.
///
/// Convex by composition; its gradient is an analytic perturbation of
/// the identity, which keeps manufactured tasks well conditioned.
#[derive(Debug, Clone)]
pub struct RidgePotential {
    amplitudes: Vec<f64>,
    directions: Vec<DVector<f64>>,
    offsets: Vec<f64>,
    dim: usize,
}

impl RidgePotential {
    pub fn new(
        amplitudes: Vec<f64>,
        directions: Vec<DVector<f64>>,
        offsets: Vec<f64>,
    ) -> Result<Self> {
        if amplitudes.len() != directions.len() || amplitudes.len() != offsets.len() {
            return Err(Error::InvalidPotential("ridge term lists differ in length".into()));
        }
        if amplitudes.iter().any(|a| *a < 0.0) {
            return Err(Error::InvalidPotential("ridge amplitudes must be non-negative".into()));
        }
        let dim = directions.first().map_or(0, |d| d.len());
        if dim == 0 && !directions.is_empty() {
            return Err(Error::InvalidPotential("zero-dimensional ridge direction".into()));
        }
        if directions.iter().any(|d| d.len() != dim) {
            return Err(Error::InvalidPotential("ridge direction dims differ".into()));
        }
        Ok(RidgePotential { amplitudes, directions, offsets, dim })
    }

    /// Identity task: no ridge terms, Ψ = ½‖x‖².
    pub fn identity(dim: usize) -> Self {
        RidgePotential { amplitudes: vec![], directions: vec![], offsets: vec![], dim }
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        if self.directions.is_empty() {
            self.dim = dim;
        }
        self
    }

    pub fn terms(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn to_spec(&self) -> MapSpec {
        MapSpec::SoftplusRidge {
            amplitudes: self.amplitudes.clone(),
            directions: self.directions.iter().map(|d| d.as_slice().to_vec()).collect(),
            offsets: self.offsets.clone(),
        }
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    crate::net::Activation::Softplus.value(x)
}

#[inline]
fn logistic(x: f64) -> f64 {
    crate::net::Activation::Softplus.deriv(x)
}

impl Potential for RidgePotential {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        assert_eq!(x.len(), self.dim, "dimension mismatch");
        let mut v = 0.5 * x.norm_squared();
        for k in 0..self.amplitudes.len() {
            v += self.amplitudes[k] * softplus(self.directions[k].dot(x) + self.offsets[k]);
        }
        v
    }

    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.dim, "dimension mismatch");
        let mut g = x.clone();
        for k in 0..self.amplitudes.len() {
            let s = logistic(self.directions[k].dot(x) + self.offsets[k]);
            g.axpy(self.amplitudes[k] * s, &self.directions[k], 1.0);
        }
        g
    }

    fn hvp(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.dim, "dimension mismatch");
        let mut h = v.clone();
        for k in 0..self.amplitudes.len() {
            let pre = self.directions[k].dot(x) + self.offsets[k];
            let s = logistic(pre);
            let curv = self.amplitudes[k] * s * (1.0 - s) * self.directions[k].dot(v);
            h.axpy(curv, &self.directions[k], 1.0);
        }
        h
    }
}

/// Serializable benchmark descriptor; a task is reproducible from this
/// alone.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskDescriptor {
    GaussianOt { dim: usize, seed: u64 },
    ConvexRidge { dim: usize, seed: u64, complexity: usize },
    EightGaussians { radius: f64, sigma: f64 },
}

/// A transport problem with samplers for both marginals and, when
/// manufactured, the exact optimal map.
#[derive(Clone)]
pub struct BenchmarkTask {
    pub p0: Distribution,
    pub p1: Distribution,
    pub ground_truth: Option<Arc<dyn Potential>>,
    pub eval_samples: usize,
    pub descriptor: TaskDescriptor,
}

impl BenchmarkTask {
    pub fn dim(&self) -> usize {
        self.p0.dim()
    }

    pub fn from_descriptor(desc: &TaskDescriptor) -> Result<Self> {
        match *desc {
            TaskDescriptor::GaussianOt { dim, seed } => Ok(make_gaussian_task(dim, seed)),
            TaskDescriptor::ConvexRidge { dim, seed, complexity } => {
                Ok(make_convex_task(dim, seed, complexity))
            }
            TaskDescriptor::EightGaussians { radius, sigma } => {
                if sigma <= 0.0 {
                    return Err(Error::InvalidDistribution("sigma must be positive".into()));
                }
                Ok(BenchmarkTask {
                    p0: Distribution::Gaussian(Gaussian::standard(2)),
                    p1: Distribution::eight_gaussians(radius, sigma),
                    ground_truth: None,
                    eval_samples: EVAL_SAMPLES,
                    descriptor: desc.clone(),
                })
            }
        }
    }
}

/// Gaussian-to-Gaussian task with the affine optimal map known in closed
/// form.
///
/// p₀ = N(0, I) and p₁ = N(m, Σ) with a random mean and a random SPD Σ of
/// condition number ≤ 16. For a standard source the monotone affine map
/// x ↦ Σ^{1/2}x + m is the gradient of the convex quadratic
/// Ψ*(x) = ½xᵀΣ^{1/2}x + mᵀx, hence optimal.
pub fn make_gaussian_task(dim: usize, seed: u64) -> BenchmarkTask {
    assert!(dim >= 1);
    let mut rng = crate::rng(seed.wrapping_mul(0x9e37_79b9).wrapping_add(17));
    let mean = DVector::from_fn(dim, |_, _| {
        1.5 * rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    // Random orthogonal basis from a QR factorization, eigenvalues
    // log-uniform in [0.5, 8] so cond(Σ) ≤ 16.
    let gauss = DMatrix::from_fn(dim, dim, |_, _| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    let q = gauss.qr().q();
    let eigs = DVector::from_fn(dim, |_, _| {
        let u: f64 = rng.gen_range(0.0..1.0);
        0.5 * (16.0f64).powf(u)
    });
    let sigma = &q * DMatrix::from_diagonal(&eigs) * q.transpose();
    // Σ^{1/2} via the same eigenbasis; symmetrize against rounding.
    let root = &q * DMatrix::from_diagonal(&eigs.map(f64::sqrt)) * q.transpose();
    let root = (&root + root.transpose()) * 0.5;
    let sigma = (&sigma + sigma.transpose()) * 0.5;

    let ground_truth = QuadraticPotential::new(root, mean.clone(), 0.0)
        .expect("manufactured quadratic is SPD");
    BenchmarkTask {
        p0: Distribution::Gaussian(Gaussian::standard(dim)),
        p1: Distribution::Gaussian(
            Gaussian::new(mean, sigma).expect("manufactured covariance is SPD"),
        ),
        ground_truth: Some(Arc::new(ground_truth)),
        eval_samples: EVAL_SAMPLES,
        descriptor: TaskDescriptor::GaussianOt { dim, seed },
    }
}

/// Non-affine task: Ψ* is the identity quadratic plus `complexity`
/// softplus ridges; p₁ is the exact pushforward ∇Ψ*#p₀.
pub fn make_convex_task(dim: usize, seed: u64, complexity: usize) -> BenchmarkTask {
    assert!(dim >= 1);
    let mut rng = crate::rng(seed.wrapping_mul(0x51_7c_c1b7).wrapping_add(3));
    let mut amplitudes = Vec::with_capacity(complexity);
    let mut directions = Vec::with_capacity(complexity);
    let mut offsets = Vec::with_capacity(complexity);
    for _ in 0..complexity {
        amplitudes.push(rng.gen_range(0.3..1.0));
        directions.push(DVector::from_fn(dim, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal) / (dim as f64).sqrt() * 2.0
        }));
        offsets.push(rng.sample::<f64, _>(rand_distr::StandardNormal));
    }
    let psi = RidgePotential::new(amplitudes, directions, offsets)
        .expect("manufactured ridge is valid")
        .with_dim(dim);
    let p0 = Distribution::Gaussian(Gaussian::standard(dim));
    let map: Arc<dyn Potential> = Arc::new(psi);
    BenchmarkTask {
        p0: p0.clone(),
        p1: Distribution::Pushforward { base: Box::new(p0), map: Arc::clone(&map) },
        ground_truth: Some(map),
        eval_samples: EVAL_SAMPLES,
        descriptor: TaskDescriptor::ConvexRidge { dim, seed, complexity },
    }
}

/// Learned map quality report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub l2_uvp: f64,
    pub cosine: f64,
    pub sample_count: usize,
    pub seed: u64,
}

/// Unexplained variance percentage:
/// `100 · ‖T − T*‖²_{L²(p₀)} / Var(p₁)` with Var the trace of the
/// covariance.
pub fn l2_uvp<T>(map: T, task: &BenchmarkTask, seed: u64) -> Result<f64>
where
    T: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    let t_star = task
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::UndefinedMetric("task has no ground-truth map".into()))?;
    map_difference_uvp(&map, |x| t_star.grad(x), task, seed)
}

/// `100 · ‖T_a − T_b‖²_{L²(p₀)} / Var(p₁)` for any two maps; the UVP is
/// the special case with T_b the ground truth.
pub fn map_difference_uvp<A, B>(
    map_a: A,
    map_b: B,
    task: &BenchmarkTask,
    seed: u64,
) -> Result<f64>
where
    A: Fn(&DVector<f64>) -> DVector<f64> + Sync,
    B: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    let mut rng = crate::rng(seed);
    let x0 = task.p0.sample(task.eval_samples, &mut rng);
    let x1 = task.p1.sample(task.eval_samples, &mut rng);
    let var_p1 = sample_covariance(&x1).trace();
    if var_p1 < 1e-12 {
        return Err(Error::UndefinedMetric(format!("Var(p1) = {var_p1:.3e} below 1e-12")));
    }
    let err: f64 = (0..x0.nrows())
        .into_par_iter()
        .map(|i| {
            let x = x0.row(i).transpose();
            (map_a(&x) - map_b(&x)).norm_squared()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum::<f64>()
        / x0.nrows() as f64;
    Ok(100.0 * err / var_p1)
}

/// Cosine similarity of displacement fields in L²(p₀):
/// `cos(T − id, T* − id)`, clipped to [−1, 1].
pub fn cosine_metric<T>(map: T, task: &BenchmarkTask, seed: u64) -> Result<f64>
where
    T: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    let t_star = task
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::UndefinedMetric("task has no ground-truth map".into()))?;
    let mut rng = crate::rng(seed);
    let x0 = task.p0.sample(task.eval_samples, &mut rng);
    let terms: Vec<(f64, f64, f64)> = (0..x0.nrows())
        .into_par_iter()
        .map(|i| {
            let x = x0.row(i).transpose();
            let a = map(&x) - &x;
            let b = t_star.grad(&x) - &x;
            (a.dot(&b), a.norm_squared(), b.norm_squared())
        })
        .collect();
    let (inner, na, nb) = terms
        .into_iter()
        .fold((0.0, 0.0, 0.0), |acc, t| (acc.0 + t.0, acc.1 + t.1, acc.2 + t.2));
    if na <= 0.0 || nb <= 0.0 {
        return Err(Error::UndefinedMetric(
            "cosine undefined: a displacement field is identically zero".into(),
        ));
    }
    Ok((inner / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Full metric evaluation at the task's sample count.
pub fn evaluate_map<T>(map: T, task: &BenchmarkTask, seed: u64) -> Result<MetricsReport>
where
    T: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    Ok(MetricsReport {
        l2_uvp: l2_uvp(&map, task, seed)?,
        cosine: cosine_metric(&map, task, seed)?,
        sample_count: task.eval_samples,
        seed,
    })
}

/// Quadrature rules for the time integral in the identity checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrature {
    /// Composite midpoint with n panels on (0,1); nodes never touch the
    /// endpoints.
    Midpoint,
    /// Composite 4-point Gauss-Legendre on n/4 panels; also endpoint-free
    /// and far more accurate for the smooth integrands here.
    GaussLegendre4,
}

/// ∫₀¹ f(t) dt by the chosen rule with `n` total evaluations.
pub fn integrate_unit_interval<F: FnMut(f64) -> f64>(rule: Quadrature, n: usize, mut f: F) -> f64 {
    assert!(n >= 4, "need at least 4 quadrature nodes");
    match rule {
        Quadrature::Midpoint => {
            let h = 1.0 / n as f64;
            (0..n).map(|k| f((k as f64 + 0.5) * h) * h).sum()
        }
        Quadrature::GaussLegendre4 => {
            const X: [f64; 4] = [
                -0.861136311594052575,
                -0.339981043584856265,
                0.339981043584856265,
                0.861136311594052575,
            ];
            const W: [f64; 4] = [
                0.347854845137453857,
                0.652145154862546143,
                0.652145154862546143,
                0.347854845137453857,
            ];
            let panels = (n / 4).max(1);
            let h = 1.0 / panels as f64;
            let mut acc = 0.0;
            for p in 0..panels {
                let a = p as f64 * h;
                for i in 0..4 {
                    let t = a + 0.5 * h * (X[i] + 1.0);
                    acc += 0.5 * h * W[i] * f(t);
                }
            }
            acc
        }
    }
}

/// Relative residual of the time-integral identity
///
/// ```text
/// ∫₀¹ ‖u^Ψ_t(x_t) − (x₁−x₀)‖² dt  =  2·[Ψ(x₀) + Ψ̄(x₁) − ⟨x₀,x₁⟩]
/// ```
///
/// The left side is evaluated by quadrature, inverting the flow map at
/// each node and using the restoration form ‖(z₀−x₀)/t‖² of the
/// integrand; the right side comes from one conjugate solve.
pub fn lemma2_check(
    psi: &dyn Potential,
    x0: &DVector<f64>,
    x1: &DVector<f64>,
    n: usize,
    rule: Quadrature,
    opts: &SubproblemOptions,
) -> Result<f64> {
    let conj = conjugate(psi, x1, opts)?;
    let rhs = 2.0 * (psi.eval(x0) + conj.value - x0.dot(x1));
    let lhs = integrate_unit_interval(rule, n, |t| {
        let x_t = (1.0 - t) * x0 + t * x1;
        let inv = invert_flow_map(psi, &x_t, t, opts);
        ((inv.z0 - x0) / t).norm_squared()
    });
    Ok((lhs - rhs).abs() / rhs.abs().max(1e-12))
}
