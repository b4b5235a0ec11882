//! Input-convex network potential.
//!
//! The architecture is the fully-connected input-convex family: hidden
//! states mix the previous state through non-negative weights and the
//! raw input through free injection weights,
//!
//! ```text
//! z₁ = σ(W₀ x + b₀)
//! zₗ₊₁ = σ(Wₗ zₗ + Aₗ x + bₗ)        Wₗ ≥ 0 elementwise
//! Ψ(x) = w·z_L + u·x + b + s·½‖x‖²   w ≥ 0, s ≥ 0
//! ```
//!
//! with σ convex and non-decreasing (softplus or CELU). Convexity is
//! enforced by clamping the constrained weights after every optimizer
//! step. The quadratic skip starts at s = 1 so the gradient map is near
//! the identity at init, which keeps the early flow-map inversion
//! subproblems well conditioned.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::net::{glorot, nonneg_uniform, Activation, Layer, Stack, TangentState};
use crate::potential::{Potential, TrainablePotential};

#[derive(Debug, Clone)]
pub struct IcnnPotential {
    stack: Stack,
    skip: f64,
    dim: usize,
    hidden: Vec<usize>,
    act: Activation,
}

impl IcnnPotential {
    pub fn new<R: Rng>(dim: usize, hidden: &[usize], act: Activation, rng: &mut R) -> Self {
        assert!(dim >= 1 && !hidden.is_empty(), "need dim >= 1 and at least one hidden layer");
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        layers.push(Layer {
            weight: glorot(hidden[0], dim, 1.0, rng),
            inject: None,
            bias: DVector::zeros(hidden[0]),
            act: Some(act),
        });
        for w in hidden.windows(2) {
            layers.push(Layer {
                weight: nonneg_uniform(w[1], w[0], 1.0 / w[0] as f64, rng),
                inject: Some(glorot(w[1], dim, 1.0, rng)),
                bias: DVector::zeros(w[1]),
                act: Some(act),
            });
        }
        let last = *hidden.last().unwrap();
        layers.push(Layer {
            weight: nonneg_uniform(1, last, 1.0 / last as f64, rng),
            inject: Some(DMatrix::zeros(1, dim)),
            bias: DVector::zeros(1),
            act: None,
        });
        IcnnPotential { stack: Stack { layers }, skip: 1.0, dim, hidden: hidden.to_vec(), act }
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn activation(&self) -> Activation {
        self.act
    }

    pub fn skip_coefficient(&self) -> f64 {
        self.skip
    }

    /// Inspect a constrained hidden-to-hidden weight (tests).
    pub fn constrained_weight(&self, layer: usize, row: usize, col: usize) -> f64 {
        self.stack.layers[layer + 1].weight[(row, col)]
    }

    /// Mutate raw weights (tests simulate an optimizer step past zero).
    pub fn set_raw_weight(&mut self, layer: usize, row: usize, col: usize, value: f64) {
        self.stack.layers[layer].weight[(row, col)] = value;
    }

    pub fn raw_weight(&self, layer: usize, row: usize, col: usize) -> f64 {
        self.stack.layers[layer].weight[(row, col)]
    }

    fn check_dim(&self, x: &DVector<f64>) {
        assert_eq!(x.len(), self.dim, "dimension mismatch: x has {}, potential {}", x.len(), self.dim);
    }
}

impl Potential for IcnnPotential {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        self.check_dim(x);
        self.stack.forward(x)[0] + 0.5 * self.skip * x.norm_squared()
    }

    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        self.check_dim(x);
        self.stack.grad_input(x) + self.skip * x
    }

    fn hvp(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.check_dim(x);
        self.check_dim(v);
        let tp = self.stack.forward_tangent(x, v);
        let (_, hv) = self.stack.tangent_vjp(&tp);
        hv + self.skip * v
    }

    fn eval_tangent(&self, x: &DVector<f64>, v: &DVector<f64>) -> TangentState {
        self.check_dim(x);
        self.check_dim(v);
        let tp = self.stack.forward_tangent(x, v);
        TangentState {
            value: tp.primal.output()[0] + 0.5 * self.skip * x.norm_squared(),
            tangent: tp.tangent_out() + self.skip * x.dot(v),
        }
    }
}

impl TrainablePotential for IcnnPotential {
    fn param_count(&self) -> usize {
        self.stack.param_count() + 1
    }

    fn params_flat(&self) -> DVector<f64> {
        let mut theta = self.stack.params_flat().as_slice().to_vec();
        theta.push(self.skip);
        DVector::from_vec(theta)
    }

    fn set_params_flat(&mut self, theta: &DVector<f64>) {
        assert_eq!(theta.len(), self.param_count(), "parameter length mismatch");
        let stack_len = theta.len() - 1;
        self.stack.set_params_flat(&DVector::from_column_slice(&theta.as_slice()[..stack_len]));
        self.skip = theta[stack_len];
    }

    fn param_grad_directional(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.check_dim(x);
        self.check_dim(v);
        let tp = self.stack.forward_tangent(x, v);
        let (grads, _) = self.stack.tangent_vjp(&tp);
        let mut g = grads.flat().as_slice().to_vec();
        // d/ds of s·⟨x, v⟩, the skip term's contribution to ⟨v, ∇Ψ(x)⟩.
        g.push(x.dot(v));
        DVector::from_vec(g)
    }

    fn project_convex(&mut self) {
        for l in &mut self.stack.layers[1..] {
            l.weight.apply(|w| *w = w.max(0.0));
        }
        self.skip = self.skip.max(0.0);
    }
}
