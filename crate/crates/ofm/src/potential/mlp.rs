//! Unconstrained MLP "potential".
//!
//! Drops the convexity constraints entirely: a plain scalar network
//! stands in for Ψ. Offered as an opt-in experiment only — nothing
//! guarantees the flow-map inversion subproblems stay convex, and the
//! trainer makes no convergence claim for this family.

use nalgebra::DVector;
use rand::Rng;

use crate::net::{mlp, Activation, Stack, TangentState};
use crate::potential::{Potential, TrainablePotential};

#[derive(Debug, Clone)]
pub struct MlpPotential {
    stack: Stack,
    dim: usize,
    hidden: Vec<usize>,
    act: Activation,
}

impl MlpPotential {
    pub fn new<R: Rng>(dim: usize, hidden: &[usize], act: Activation, rng: &mut R) -> Self {
        let mut dims = vec![dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        MlpPotential { stack: mlp(&dims, act, rng), dim, hidden: hidden.to_vec(), act }
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn activation(&self) -> Activation {
        self.act
    }
}

impl Potential for MlpPotential {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        self.stack.forward(x)[0]
    }

    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        self.stack.grad_input(x)
    }

    fn hvp(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let tp = self.stack.forward_tangent(x, v);
        self.stack.tangent_vjp(&tp).1
    }

    fn eval_tangent(&self, x: &DVector<f64>, v: &DVector<f64>) -> TangentState {
        let tp = self.stack.forward_tangent(x, v);
        TangentState { value: tp.primal.output()[0], tangent: tp.tangent_out() }
    }
}

impl TrainablePotential for MlpPotential {
    fn param_count(&self) -> usize {
        self.stack.param_count()
    }

    fn params_flat(&self) -> DVector<f64> {
        self.stack.params_flat()
    }

    fn set_params_flat(&mut self, theta: &DVector<f64>) {
        self.stack.set_params_flat(theta);
    }

    fn param_grad_directional(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let tp = self.stack.forward_tangent(x, v);
        self.stack.tangent_vjp(&tp).0.flat()
    }

    fn project_convex(&mut self) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn derivatives_consistent() {
        let mut r = rng(21);
        let p = MlpPotential::new(3, &[6, 4], Activation::Softplus, &mut r);
        let x = DVector::from_fn(3, |_, _| r.sample::<f64, _>(rand_distr::StandardNormal));
        let v = DVector::from_fn(3, |_, _| r.sample::<f64, _>(rand_distr::StandardNormal));
        let h = 1e-5;
        let fd_grad = DVector::from_fn(3, |i, _| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            (p.eval(&xp) - p.eval(&xm)) / (2.0 * h)
        });
        assert!((p.grad(&x) - fd_grad).abs().max() < 1e-7);
        let fd_hvp = (p.grad(&(&x + &v * h)) - p.grad(&(&x - &v * h))) / (2.0 * h);
        assert!((p.hvp(&x, &v) - fd_hvp).abs().max() < 1e-6);
    }
}
