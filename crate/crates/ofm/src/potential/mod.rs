//! Convex scalar potentials with exact derivative oracles.
//!
//! A [`Potential`] is a convex function `Ψ: R^D → R` exposing its value,
//! gradient, Hessian-vector products and (for trainable families)
//! parameter-space directional gradients. Two families live here: an
//! analytic quadratic used as a closed-form test double for every
//! Ψ-dependent formula, and an input-convex network. The benchmark
//! module adds a softplus-ridge family for manufactured ground truth.

mod icnn;
mod mlp;

pub use icnn::IcnnPotential;
pub use mlp::MlpPotential;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::net::TangentState;

/// Dense-Hessian size guard: above this the CG path on `hvp` should be
/// used instead of materializing the matrix.
pub const DENSE_HESSIAN_LIMIT: usize = 512;

pub trait Potential: Send + Sync {
    fn dim(&self) -> usize;

    /// Ψ(x).
    fn eval(&self, x: &DVector<f64>) -> f64;

    /// ∇Ψ(x), exact.
    fn grad(&self, x: &DVector<f64>) -> DVector<f64>;

    /// ∇²Ψ(x)·v, exact.
    fn hvp(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64>;

    /// Value and directional derivative ⟨∇Ψ(x), v⟩ in one pass.
    fn eval_tangent(&self, x: &DVector<f64>, v: &DVector<f64>) -> TangentState {
        TangentState { value: self.eval(x), tangent: self.grad(x).dot(v) }
    }

    /// Dense Hessian assembled from `dim` basis Hessian-vector products
    /// and symmetrized as (H + Hᵀ)/2.
    fn hessian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let d = self.dim();
        if d > DENSE_HESSIAN_LIMIT {
            return Err(Error::DimensionLimit { dim: d, limit: DENSE_HESSIAN_LIMIT });
        }
        let mut h = DMatrix::zeros(d, d);
        let mut e = DVector::zeros(d);
        for j in 0..d {
            e[j] = 1.0;
            h.set_column(j, &self.hvp(x, &e));
            e[j] = 0.0;
        }
        let ht = h.transpose();
        Ok((h + ht) * 0.5)
    }
}

/// A potential with an optimizable parameter vector.
pub trait TrainablePotential: Potential {
    fn param_count(&self) -> usize;

    fn params_flat(&self) -> DVector<f64>;

    fn set_params_flat(&mut self, theta: &DVector<f64>);

    /// d/dθ ⟨v, ∇Ψ_θ(x)⟩ with `x` and `v` held constant.
    ///
    /// Computed as a reverse sweep over the forward-tangent pass: the
    /// tangent output of the dual-number channel *is* ⟨v, ∇Ψ(x)⟩, so its
    /// parameter adjoints are exactly the requested gradient.
    fn param_grad_directional(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64>;

    /// Clamp constrained weights to keep the function convex. Called
    /// after every optimizer step; a no-op for unconstrained families.
    fn project_convex(&mut self);
}

/// Ψ(x) = ½ xᵀA x + bᵀx + c with A symmetric positive-semidefinite.
#[derive(Debug, Clone)]
pub struct QuadraticPotential {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
}

impl QuadraticPotential {
    /// Validates symmetry (within 1e-12) and positive-semidefiniteness
    /// (eigenvalues ≥ −1e-10).
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, c: f64) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d || b.len() != d {
            return Err(Error::InvalidPotential(format!(
                "quadratic shape mismatch: A is {}x{}, b has {}",
                a.nrows(),
                a.ncols(),
                b.len()
            )));
        }
        let asym = (&a - a.transpose()).abs().max();
        if asym > 1e-12 {
            return Err(Error::InvalidPotential(format!(
                "A not symmetric: max |A - Aᵀ| = {asym:.3e}"
            )));
        }
        let min_eig = a
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-10 {
            return Err(Error::InvalidPotential(format!(
                "A not positive-semidefinite: min eigenvalue {min_eig:.3e}"
            )));
        }
        Ok(QuadraticPotential { a, b, c })
    }

    /// ½‖x‖², the identity-map potential.
    pub fn identity(dim: usize) -> Self {
        QuadraticPotential {
            a: DMatrix::identity(dim, dim),
            b: DVector::zeros(dim),
            c: 0.0,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn shift(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn constant(&self) -> f64 {
        self.c
    }
}

impl Potential for QuadraticPotential {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        assert_eq!(x.len(), self.dim(), "dimension mismatch");
        0.5 * x.dot(&(&self.a * x)) + self.b.dot(x) + self.c
    }

    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.dim(), "dimension mismatch");
        &self.a * x + &self.b
    }

    fn hvp(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.dim(), "dimension mismatch");
        assert_eq!(v.len(), self.dim(), "dimension mismatch");
        &self.a * v
    }

    fn hessian(&self, _x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.a.clone())
    }
}
