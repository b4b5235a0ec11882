//! Distribution samplers and transport-plan samplers.
//!
//! A plan π couples samples of p₀ and p₁ into paired batches. Three
//! couplings are provided: the independent plan, the exact minibatch OT
//! plan (Hungarian assignment under the quadratic cost), and the
//! adversarial anti-minibatch plan (same assignment under the negated
//! cost). Re-pairing permutes x₁ rows only, so the x₀ marginal of a
//! paired batch never depends on the plan.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::solve_assignment;
use crate::error::{Error, Result};
use crate::potential::{Potential, QuadraticPotential};

/// Largest batch the exact assignment solver accepts (O(B³)).
pub const ASSIGNMENT_LIMIT: usize = 512;

/// Multivariate Gaussian stored with a Cholesky factor of its covariance.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::InvalidDistribution(format!(
                "covariance {}x{} does not match mean dim {}",
                cov.nrows(),
                cov.ncols(),
                mean.len()
            )));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| {
                Error::InvalidDistribution("covariance not positive-definite".into())
            })?
            .l();
        Ok(Gaussian { mean, chol })
    }

    pub fn standard(dim: usize) -> Self {
        Gaussian { mean: DVector::zeros(dim), chol: DMatrix::identity(dim, dim) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        &self.mean + &self.chol * z
    }
}

/// A sampleable source distribution.
#[derive(Clone)]
pub enum Distribution {
    Gaussian(Gaussian),
    Mixture { weights: Vec<f64>, components: Vec<Gaussian> },
    /// Base samples pushed forward through the gradient of a convex map.
    Pushforward { base: Box<Distribution>, map: Arc<dyn Potential> },
}

impl Distribution {
    pub fn mixture(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if weights.len() != components.len() || components.is_empty() {
            return Err(Error::InvalidDistribution(
                "mixture needs matching, non-empty weights and components".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidDistribution(format!(
                "mixture weights sum to {sum}, expected 1"
            )));
        }
        if weights.iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidDistribution("negative mixture weight".into()));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::InvalidDistribution("mixture component dims differ".into()));
        }
        Ok(Distribution::Mixture { weights, components })
    }

    /// Eight equal-weight Gaussians spaced uniformly on a circle.
    pub fn eight_gaussians(radius: f64, sigma: f64) -> Self {
        let components = (0..8)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / 8.0;
                Gaussian {
                    mean: DVector::from_vec(vec![radius * angle.cos(), radius * angle.sin()]),
                    chol: DMatrix::identity(2, 2) * sigma,
                }
            })
            .collect();
        Distribution::Mixture { weights: vec![1.0 / 8.0; 8], components }
    }

    pub fn dim(&self) -> usize {
        match self {
            Distribution::Gaussian(g) => g.dim(),
            Distribution::Mixture { components, .. } => components[0].dim(),
            Distribution::Pushforward { base, .. } => base.dim(),
        }
    }

    /// Draw `n` i.i.d. samples as rows. Deterministic under a fixed RNG
    /// stream.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> DMatrix<f64> {
        assert!(n >= 1, "need at least one sample");
        let d = self.dim();
        let mut out = DMatrix::zeros(n, d);
        for i in 0..n {
            let x = self.draw(rng);
            out.row_mut(i).copy_from(&x.transpose());
        }
        out
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            Distribution::Gaussian(g) => g.draw(rng),
            Distribution::Mixture { weights, components } => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = components.len() - 1;
                for (k, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                components[pick].draw(rng)
            }
            Distribution::Pushforward { base, map } => map.grad(&base.draw(rng)),
        }
    }
}

/// How a paired batch was coupled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanKind {
    Independent,
    Minibatch,
    Antiminibatch,
    GroundTruth,
}

impl std::fmt::Display for PlanKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PlanKind::Independent => "independent",
            PlanKind::Minibatch => "minibatch",
            PlanKind::Antiminibatch => "antiminibatch",
            PlanKind::GroundTruth => "ground-truth",
        };
        f.write_str(s)
    }
}

/// A coupled batch: row i of `x0` is paired with row i of `x1`.
#[derive(Debug, Clone)]
pub struct PairedBatch {
    pub x0: DMatrix<f64>,
    pub x1: DMatrix<f64>,
    pub provenance: PlanKind,
}

impl PairedBatch {
    pub fn len(&self) -> usize {
        self.x0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.nrows() == 0
    }

    pub fn pair(&self, i: usize) -> (DVector<f64>, DVector<f64>) {
        (self.x0.row(i).transpose(), self.x1.row(i).transpose())
    }

    /// Mean quadratic transport cost ½‖x₁−x₀‖² of the coupling.
    pub fn transport_cost(&self) -> f64 {
        let b = self.len() as f64;
        (0..self.len())
            .map(|i| 0.5 * (self.x1.row(i) - self.x0.row(i)).norm_squared())
            .sum::<f64>()
            / b
    }
}

/// Pair rows in the given order.
pub fn pair_independent(x0: DMatrix<f64>, x1: DMatrix<f64>) -> Result<PairedBatch> {
    if x0.nrows() != x1.nrows() {
        return Err(Error::BatchMismatch { left: x0.nrows(), right: x1.nrows() });
    }
    Ok(PairedBatch { x0, x1, provenance: PlanKind::Independent })
}

/// Exact discrete OT coupling of two batches.
///
/// Solves the B×B assignment with cost `sign·‖x0_i − x1_j‖²` and permutes
/// the rows of `x1` accordingly. `sign = +1` gives the minibatch plan,
/// `sign = −1` the anti-minibatch plan.
pub fn pair_minibatch_ot(x0: DMatrix<f64>, x1: DMatrix<f64>, sign: i8) -> Result<PairedBatch> {
    if x0.nrows() != x1.nrows() {
        return Err(Error::BatchMismatch { left: x0.nrows(), right: x1.nrows() });
    }
    let b = x0.nrows();
    if b > ASSIGNMENT_LIMIT {
        return Err(Error::BatchLimit { size: b, limit: ASSIGNMENT_LIMIT });
    }
    assert!(sign == 1 || sign == -1, "sign must be +1 or -1");
    let cost = DMatrix::from_fn(b, b, |i, j| {
        sign as f64 * (x0.row(i) - x1.row(j)).norm_squared()
    });
    let perm = solve_assignment(&cost);
    let mut x1_perm = DMatrix::zeros(b, x1.ncols());
    for (i, &j) in perm.iter().enumerate() {
        x1_perm.row_mut(i).copy_from(&x1.row(j));
    }
    Ok(PairedBatch {
        x0,
        x1: x1_perm,
        provenance: if sign == 1 { PlanKind::Minibatch } else { PlanKind::Antiminibatch },
    })
}

/// Serializable description of a distribution, as written in experiment
/// configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DistributionSpec {
    Gaussian {
        mean: Vec<f64>,
        /// Row-major covariance matrix.
        cov: Vec<Vec<f64>>,
    },
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covs: Vec<Vec<Vec<f64>>>,
    },
    /// The 2D eight-Gaussians ring.
    EightGaussians { radius: f64, sigma: f64 },
    StandardGaussian { dim: usize },
    PushforwardOfGaussian { base: Box<DistributionSpec>, map: MapSpec },
}

/// Serializable convex maps usable as pushforward gradients and ground
/// truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MapSpec {
    Quadratic { a: Vec<Vec<f64>>, b: Vec<f64>, c: f64 },
    SoftplusRidge { amplitudes: Vec<f64>, directions: Vec<Vec<f64>>, offsets: Vec<f64> },
}

impl MapSpec {
    pub fn build(&self) -> Result<Arc<dyn Potential>> {
        match self {
            MapSpec::Quadratic { a, b, c } => {
                let d = b.len();
                let mat = matrix_from_rows(a, d)?;
                Ok(Arc::new(QuadraticPotential::new(mat, DVector::from_vec(b.clone()), *c)?))
            }
            MapSpec::SoftplusRidge { amplitudes, directions, offsets } => {
                Ok(Arc::new(crate::benchmark::RidgePotential::new(
                    amplitudes.clone(),
                    directions.iter().map(|d| DVector::from_vec(d.clone())).collect(),
                    offsets.clone(),
                )?))
            }
        }
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], dim: usize) -> Result<DMatrix<f64>> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::InvalidDistribution(format!("expected a {dim}x{dim} matrix")));
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

impl DistributionSpec {
    pub fn build(&self) -> Result<Distribution> {
        match self {
            DistributionSpec::Gaussian { mean, cov } => {
                let d = mean.len();
                Ok(Distribution::Gaussian(Gaussian::new(
                    DVector::from_vec(mean.clone()),
                    matrix_from_rows(cov, d)?,
                )?))
            }
            DistributionSpec::GaussianMixture { weights, means, covs } => {
                if means.len() != covs.len() {
                    return Err(Error::InvalidDistribution(
                        "mixture means/covs length mismatch".into(),
                    ));
                }
                let comps = means
                    .iter()
                    .zip(covs)
                    .map(|(m, c)| {
                        Gaussian::new(DVector::from_vec(m.clone()), matrix_from_rows(c, m.len())?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Distribution::mixture(weights.clone(), comps)
            }
            DistributionSpec::EightGaussians { radius, sigma } => {
                if *sigma <= 0.0 {
                    return Err(Error::InvalidDistribution("sigma must be positive".into()));
                }
                Ok(Distribution::eight_gaussians(*radius, *sigma))
            }
            DistributionSpec::StandardGaussian { dim } => {
                if *dim == 0 {
                    return Err(Error::InvalidDistribution("dim must be >= 1".into()));
                }
                Ok(Distribution::Gaussian(Gaussian::standard(*dim)))
            }
            DistributionSpec::PushforwardOfGaussian { base, map } => {
                let base_dist = base.build()?;
                let map = map.build()?;
                if map.dim() != base_dist.dim() {
                    return Err(Error::InvalidDistribution(
                        "pushforward map dim does not match base".into(),
                    ));
                }
                Ok(Distribution::Pushforward { base: Box::new(base_dist), map })
            }
        }
    }
}

/// Draw a coupled batch from the configured plan.
///
/// The minibatch plans assign within chunks of `mb_size` (the paper-style
/// small assignment batches) and concatenate chunks to reach `n`.
pub fn sample_plan<R: Rng>(
    p0: &Distribution,
    p1: &Distribution,
    plan: PlanKind,
    n: usize,
    mb_size: usize,
    rng: &mut R,
) -> Result<PairedBatch> {
    match plan {
        PlanKind::Independent => pair_independent(p0.sample(n, rng), p1.sample(n, rng)),
        PlanKind::Minibatch | PlanKind::Antiminibatch => {
            let sign = if plan == PlanKind::Minibatch { 1 } else { -1 };
            let chunk = mb_size.max(1).min(n);
            let d = p0.dim();
            let mut x0 = DMatrix::zeros(n, d);
            let mut x1 = DMatrix::zeros(n, p1.dim());
            let mut filled = 0;
            while filled < n {
                let m = chunk.min(n - filled);
                let part = pair_minibatch_ot(p0.sample(m, rng), p1.sample(m, rng), sign)?;
                x0.rows_mut(filled, m).copy_from(&part.x0);
                x1.rows_mut(filled, m).copy_from(&part.x1);
                filled += m;
            }
            Ok(PairedBatch { x0, x1, provenance: plan })
        }
        PlanKind::GroundTruth => Err(Error::InvalidDistribution(
            "ground-truth plan requires a benchmark task with a known map".into(),
        )),
    }
}

/// Paired batch from the exact coupling (id, ∇Ψ*)#p₀ of a known map.
pub fn sample_ground_truth_plan<R: Rng>(
    p0: &Distribution,
    map: &dyn Potential,
    n: usize,
    rng: &mut R,
) -> PairedBatch {
    let x0 = p0.sample(n, rng);
    let mut x1 = DMatrix::zeros(n, p0.dim());
    for i in 0..n {
        x1.row_mut(i).copy_from(&map.grad(&x0.row(i).transpose()).transpose());
    }
    PairedBatch { x0, x1, provenance: PlanKind::GroundTruth }
}

/// Empirical mean of each column.
pub fn sample_mean(xs: &DMatrix<f64>) -> DVector<f64> {
    let n = xs.nrows() as f64;
    DVector::from_fn(xs.ncols(), |j, _| xs.column(j).sum() / n)
}

/// Empirical covariance (denominator n).
pub fn sample_covariance(xs: &DMatrix<f64>) -> DMatrix<f64> {
    let n = xs.nrows() as f64;
    let mean = sample_mean(xs);
    let mut cov = DMatrix::zeros(xs.ncols(), xs.ncols());
    for i in 0..xs.nrows() {
        let c = xs.row(i).transpose() - &mean;
        cov.ger(1.0 / n, &c, &c, 1.0);
    }
    cov
}
