//! Flow-map inversion and convex-conjugate subproblems.
//!
//! Recovering the initial point of a linear trajectory from its position
//! at time t means minimizing
//!
//! ```text
//! F(z) = (1−t)/2·‖z‖² + t·Ψ(z) − ⟨x_t, z⟩
//! ```
//!
//! which is at least (1−t)-strongly convex, so the minimizer is unique
//! for t < 1. The convex conjugate Ψ̄(y) = sup_x ⟨y,x⟩ − Ψ(x) reuses the
//! same quasi-Newton machinery on the negated objective. An optional
//! amortizer network predicts warm starts for the inversion; training it
//! regresses predictions onto detached solver outputs.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lbfgs::{minimize, LbfgsOptions};
use crate::net::{mlp, Activation, Stack};
use crate::optim::Adam;
use crate::potential::Potential;

/// Inner-solver knobs, exposed through the experiment config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SubproblemOptions {
    /// Gradient tolerance scale; the stop threshold is `tol_grad·√D`.
    pub tol_grad: f64,
    /// Iteration cap for the inner solver.
    pub k_sub: usize,
    /// L-BFGS memory.
    pub memory: usize,
    /// Time clamp: t is kept inside [eps_t, 1−eps_t] by the trainer, and
    /// capped at 1−eps_t here.
    pub eps_t: f64,
    /// Iterate-norm bound past which the conjugate is declared unbounded.
    pub divergence_bound: f64,
}

impl Default for SubproblemOptions {
    fn default() -> Self {
        SubproblemOptions {
            tol_grad: 1e-8,
            k_sub: 50,
            memory: 10,
            eps_t: 1e-3,
            divergence_bound: 1e6,
        }
    }
}

impl SubproblemOptions {
    pub fn grad_threshold(&self, dim: usize) -> f64 {
        self.tol_grad * (dim as f64).sqrt()
    }

    pub fn clamp_t(&self, t: f64) -> f64 {
        t.clamp(self.eps_t, 1.0 - self.eps_t)
    }
}

/// Recovered initial point plus solver diagnostics.
///
/// At convergence the residual identity `(1−t)z₀ + t∇Ψ(z₀) = x_t` holds
/// within the gradient threshold, because the residual *is* ∇F(z₀).
#[derive(Debug, Clone)]
pub struct InversionResult {
    pub z0: DVector<f64>,
    pub grad_norm_final: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Solve the inversion from the default x_t initialization.
pub fn invert_flow_map(
    psi: &dyn Potential,
    x_t: &DVector<f64>,
    t: f64,
    opts: &SubproblemOptions,
) -> InversionResult {
    invert_flow_map_from(psi, x_t, t, x_t.clone(), opts)
}

/// Solve the inversion from a caller-supplied initialization.
pub fn invert_flow_map_from(
    psi: &dyn Potential,
    x_t: &DVector<f64>,
    t: f64,
    init: DVector<f64>,
    opts: &SubproblemOptions,
) -> InversionResult {
    assert_eq!(x_t.len(), psi.dim(), "dimension mismatch");
    // Strong convexity degenerates at t = 1; cap just below. Small and
    // zero t need no floor here: F is still strongly convex.
    let t = t.min(1.0 - opts.eps_t).max(0.0);
    let lbfgs = LbfgsOptions {
        tol_grad: opts.grad_threshold(psi.dim()),
        max_iters: opts.k_sub,
        memory: opts.memory,
        divergence_norm: None,
    };
    let out = minimize(
        |z| {
            let val = 0.5 * (1.0 - t) * z.norm_squared() + t * psi.eval(z) - x_t.dot(z);
            let grad = (1.0 - t) * z + t * psi.grad(z) - x_t;
            (val, grad)
        },
        init,
        &lbfgs,
    );
    InversionResult {
        z0: out.x,
        grad_norm_final: out.grad_norm,
        iterations: out.iterations,
        converged: out.converged,
    }
}

/// Conjugate value Ψ̄(y) with its argmax.
#[derive(Debug, Clone)]
pub struct ConjugateResult {
    pub value: f64,
    pub argmax: DVector<f64>,
    pub converged: bool,
}

/// Fenchel conjugate Ψ̄(y) = sup_x [⟨y,x⟩ − Ψ(x)].
///
/// Minimizes Ψ(x) − ⟨y,x⟩ from the initialization x = y. Plain convexity
/// does not guarantee the sup is attained, so an iterate-norm bound turns
/// runaway iterates into [`Error::ConjugateDiverged`].
pub fn conjugate(
    psi: &dyn Potential,
    y: &DVector<f64>,
    opts: &SubproblemOptions,
) -> Result<ConjugateResult> {
    assert_eq!(y.len(), psi.dim(), "dimension mismatch");
    let lbfgs = LbfgsOptions {
        tol_grad: opts.grad_threshold(psi.dim()),
        max_iters: opts.k_sub,
        memory: opts.memory,
        divergence_norm: Some(opts.divergence_bound),
    };
    let out = minimize(|x| (psi.eval(x) - y.dot(x), psi.grad(x) - y), y.clone(), &lbfgs);
    if out.diverged {
        return Err(Error::ConjugateDiverged { norm: out.x.norm(), bound: opts.divergence_bound });
    }
    Ok(ConjugateResult { value: -out.value, argmax: out.x, converged: out.converged })
}

/// Warm-start predictor A_φ: (x_t, t) ↦ z_init for the inversion.
#[derive(Debug, Clone)]
pub struct AmortizerNet {
    stack: Stack,
    dim: usize,
}

impl AmortizerNet {
    /// Feed-forward net on (x_t, t); the time enters as one extra input
    /// coordinate.
    pub fn new<R: Rng>(dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut dims = vec![dim + 1];
        dims.extend_from_slice(hidden);
        dims.push(dim);
        AmortizerNet { stack: mlp(&dims, Activation::Relu, rng), dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn predict(&self, x_t: &DVector<f64>, t: f64) -> DVector<f64> {
        assert_eq!(x_t.len(), self.dim, "dimension mismatch");
        let mut input = x_t.as_slice().to_vec();
        input.push(t);
        self.stack.forward(&DVector::from_vec(input))
    }

    pub fn param_count(&self) -> usize {
        self.stack.param_count()
    }

    pub fn params_flat(&self) -> DVector<f64> {
        self.stack.params_flat()
    }

    pub fn set_params_flat(&mut self, phi: &DVector<f64>) {
        self.stack.set_params_flat(phi);
    }
}

/// Inversion initialized at the amortizer's prediction. Same contract and
/// the same unique minimizer as [`invert_flow_map`].
pub fn amortized_invert(
    psi: &dyn Potential,
    amortizer: &AmortizerNet,
    x_t: &DVector<f64>,
    t: f64,
    opts: &SubproblemOptions,
) -> InversionResult {
    invert_flow_map_from(psi, x_t, t, amortizer.predict(x_t, t), opts)
}

/// One regression step of the amortizer onto detached inversion targets:
/// `L = (1/B)·Σ ‖A_φ(x_t, t) − z₀‖²`. Returns the batch loss before the
/// update.
pub fn train_amortizer(
    amortizer: &mut AmortizerNet,
    optimizer: &mut Adam,
    batch: &[(DVector<f64>, f64, DVector<f64>)],
) -> f64 {
    assert!(!batch.is_empty(), "empty amortizer batch");
    let b = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = DVector::zeros(amortizer.stack.param_count());
    for (x_t, t, z0) in batch {
        let mut input = x_t.as_slice().to_vec();
        input.push(*t);
        let fwd = amortizer.stack.forward_full(&DVector::from_vec(input));
        let resid = fwd.output() - z0;
        loss += resid.norm_squared() / b;
        let seed = resid * (2.0 / b);
        let (g, _) = amortizer.stack.vjp(&fwd, &seed);
        grad += g.flat();
    }
    let mut phi = amortizer.stack.params_flat();
    optimizer.step(&mut phi, &grad);
    amortizer.stack.set_params_flat(&phi);
    loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::{IcnnPotential, QuadraticPotential};
    use crate::rng;
    use nalgebra::{dmatrix, dvector, DMatrix};

    fn randn(d: usize, r: &mut crate::Rng) -> DVector<f64> {
        DVector::from_fn(d, |_, _| r.sample::<f64, _>(rand_distr::StandardNormal))
    }

    fn random_icnn(d: usize, seed: u64) -> IcnnPotential {
        let mut r = rng(seed);
        let mut p = IcnnPotential::new(d, &[8, 8], Activation::Softplus, &mut r);
        use crate::potential::TrainablePotential;
        let mut th = p.params_flat();
        for i in 0..th.len() - 1 {
            th[i] += 0.1 * r.sample::<f64, _>(rand_distr::StandardNormal);
        }
        p.set_params_flat(&th);
        p.project_convex();
        p
    }

    #[test]
    fn identity_potential_fixed_point() {
        let psi = QuadraticPotential::identity(3);
        let opts = SubproblemOptions::default();
        let mut r = rng(1);
        for &t in &[0.0, 0.2, 0.5, 0.9, 0.999] {
            let x_t = randn(3, &mut r);
            let res = invert_flow_map(&psi, &x_t, t, &opts);
            assert!(res.converged);
            assert!((res.z0 - &x_t).abs().max() < 1e-9, "t = {t}");
        }
    }

    #[test]
    fn t_zero_returns_x_t_for_any_potential() {
        let psi = random_icnn(2, 2);
        let opts = SubproblemOptions::default();
        let x_t = dvector![0.4, -1.1];
        let res = invert_flow_map(&psi, &x_t, 0.0, &opts);
        assert!(res.converged);
        assert!((res.z0 - &x_t).abs().max() < 1e-12);
    }

    #[test]
    fn quadratic_inversion_matches_linear_solve() {
        let a = dmatrix![2.0, 0.4; 0.4, 1.2];
        let b = dvector![0.5, -0.3];
        let psi = QuadraticPotential::new(a.clone(), b.clone(), 0.0).unwrap();
        let opts = SubproblemOptions { tol_grad: 1e-12, k_sub: 100, ..Default::default() };
        let mut r = rng(3);
        for &t in &[0.1, 0.45, 0.8, 0.99] {
            let x_t = randn(2, &mut r);
            // ((1−t)I + tA) z = x_t − t b
            let m = DMatrix::identity(2, 2) * (1.0 - t) + &a * t;
            let expect = m.lu().solve(&(&x_t - &b * t)).unwrap();
            let res = invert_flow_map(&psi, &x_t, t, &opts);
            assert!(res.converged);
            let rel = (&res.z0 - &expect).norm() / expect.norm().max(1e-12);
            assert!(rel < 1e-8, "t={t} rel={rel}");
        }
    }

    #[test]
    fn unique_minimizer_from_different_inits() {
        let psi = random_icnn(3, 4);
        let opts = SubproblemOptions::default();
        let mut r = rng(5);
        for _ in 0..10 {
            let x_t = randn(3, &mut r);
            let t = r.gen_range(0.05..0.995f64).min(1.0 - opts.eps_t);
            let a = invert_flow_map_from(&psi, &x_t, t, randn(3, &mut r) * 3.0, &opts);
            let b = invert_flow_map_from(&psi, &x_t, t, randn(3, &mut r) * 3.0, &opts);
            assert!(a.converged && b.converged);
            assert!((a.z0 - b.z0).abs().max() < 1e-6);
        }
    }

    #[test]
    fn round_trip_recovers_initial_point() {
        let psi = random_icnn(2, 6);
        let opts = SubproblemOptions::default();
        let mut r = rng(7);
        for _ in 0..50 {
            let z0 = randn(2, &mut r);
            let t: f64 = r.gen_range(1e-3..0.999);
            let x_t = (1.0 - t) * &z0 + t * psi.grad(&z0);
            let res = invert_flow_map(&psi, &x_t, t, &opts);
            assert!(res.converged);
            assert!((&res.z0 - &z0).norm() < 1e-6);
            // Residual identity at convergence.
            let resid = (1.0 - t) * &res.z0 + t * psi.grad(&res.z0) - &x_t;
            assert!(resid.norm() <= opts.grad_threshold(2) * 1.001);
        }
    }

    #[test]
    fn conjugate_of_half_norm_is_half_norm() {
        let psi = QuadraticPotential::identity(2);
        let opts = SubproblemOptions::default();
        let y = dvector![1.5, -2.0];
        let res = conjugate(&psi, &y, &opts).unwrap();
        assert!(res.converged);
        assert!((res.value - 0.5 * y.norm_squared()).abs() < 1e-10);
        assert!((res.argmax - &y).abs().max() < 1e-8);
    }

    #[test]
    fn conjugate_of_quadratic_matches_closed_form() {
        let a = dmatrix![1.8, 0.3; 0.3, 1.1];
        let b = dvector![0.2, -0.7];
        let psi = QuadraticPotential::new(a.clone(), b.clone(), 0.0).unwrap();
        let opts = SubproblemOptions { tol_grad: 1e-12, k_sub: 100, ..Default::default() };
        let mut r = rng(8);
        for _ in 0..10 {
            let y = randn(2, &mut r) * 2.0;
            let res = conjugate(&psi, &y, &opts).unwrap();
            let diff = &y - &b;
            let expect = 0.5 * diff.dot(&a.clone().cholesky().unwrap().solve(&diff));
            let rel = (res.value - expect).abs() / expect.abs().max(1e-12);
            assert!(rel < 1e-8, "rel={rel}");
            // ∇Ψ(x̂) = y at the optimum.
            assert!((psi.grad(&res.argmax) - &y).norm() < 1e-8);
        }
    }

    #[test]
    fn fenchel_young_equality_at_solution() {
        let psi = random_icnn(2, 9);
        let opts = SubproblemOptions { tol_grad: 1e-10, k_sub: 200, ..Default::default() };
        let mut r = rng(10);
        for _ in 0..20 {
            let y = randn(2, &mut r);
            let res = conjugate(&psi, &y, &opts).unwrap();
            assert!(res.converged);
            let fy = psi.eval(&res.argmax) + res.value - y.dot(&res.argmax);
            assert!(fy.abs() < 1e-8, "Fenchel-Young residual {fy}");
        }
    }

    #[test]
    fn conjugate_involution_on_quadratics() {
        // Ψ̄̄ = Ψ for closed convex Ψ; check values at random points by
        // conjugating twice numerically.
        let a = dmatrix![1.5, 0.2; 0.2, 0.9];
        let b = dvector![0.4, 0.1];
        let psi = QuadraticPotential::new(a.clone(), b.clone(), 0.0).unwrap();
        let opts = SubproblemOptions { tol_grad: 1e-12, k_sub: 200, ..Default::default() };
        // Ψ̄ as a closure potential is awkward; use the closed form
        // Ψ̄(y) = ½(y−b)ᵀA⁻¹(y−b) and conjugate it numerically.
        let a_inv = a.clone().cholesky().unwrap().inverse();
        let conj =
            QuadraticPotential::new(a_inv.clone(), -(&a_inv * &b), 0.5 * b.dot(&(&a_inv * &b)))
                .unwrap();
        let mut r = rng(11);
        for _ in 0..10 {
            let x = randn(2, &mut r);
            let back = conjugate(&conj, &x, &opts).unwrap();
            assert!((back.value - psi.eval(&x)).abs() < 1e-6);
        }
    }

    #[test]
    fn diverging_conjugate_is_reported() {
        // Ψ affine: ⟨y−g, x⟩ unbounded above for y ≠ g. A quadratic with
        // A = 0 is admissible (PSD) and makes the sup infinite.
        let psi =
            QuadraticPotential::new(DMatrix::zeros(2, 2), dvector![1.0, 0.0], 0.0).unwrap();
        let opts = SubproblemOptions { k_sub: 500, divergence_bound: 1e4, ..Default::default() };
        let out = conjugate(&psi, &dvector![2.0, 1.0], &opts);
        assert!(matches!(out, Err(Error::ConjugateDiverged { .. })));
    }

    #[test]
    fn amortizer_zero_init_still_converges() {
        let psi = QuadraticPotential::identity(2);
        let mut r = rng(12);
        let mut amor = AmortizerNet::new(2, &[8], &mut r);
        amor.set_params_flat(&DVector::zeros(amor.param_count()));
        let opts = SubproblemOptions::default();
        let x_t = dvector![0.7, -0.9];
        assert_eq!(amor.predict(&x_t, 0.3), DVector::zeros(2));
        let res = amortized_invert(&psi, &amor, &x_t, 0.3, &opts);
        assert!(res.converged);
        assert!((res.z0 - &x_t).abs().max() < 1e-8);
    }

    #[test]
    fn amortized_agrees_with_plain_inversion() {
        let psi = random_icnn(2, 13);
        let mut r = rng(14);
        let amor = AmortizerNet::new(2, &[8, 8], &mut r);
        let opts = SubproblemOptions::default();
        for _ in 0..10 {
            let x_t = randn(2, &mut r);
            let t = r.gen_range(0.05..0.95);
            let a = amortized_invert(&psi, &amor, &x_t, t, &opts);
            let b = invert_flow_map(&psi, &x_t, t, &opts);
            assert!((a.z0 - b.z0).abs().max() < 1e-6);
        }
    }

    #[test]
    fn amortizer_loss_values() {
        let mut r = rng(15);
        // Scalar case: z_init = 2 (forced), z0 = 0 → loss (2−0)² = 4.
        let mut amor = AmortizerNet::new(1, &[2], &mut r);
        let n = amor.param_count();
        // Zero everything, then set the output bias to 2.
        let mut phi = DVector::zeros(n);
        // Params are flattened layer-by-layer (weight, bias); the final
        // bias is the last entry.
        phi[n - 1] = 2.0;
        amor.set_params_flat(&phi);
        assert_eq!(amor.predict(&dvector![0.3], 0.5)[0], 2.0);

        let mut opt = Adam::new(n, 0.0); // lr 0: loss probe only
        let batch = vec![(dvector![0.3], 0.5, dvector![0.0])];
        let loss = train_amortizer(&mut amor, &mut opt, &batch);
        assert!((loss - 4.0).abs() < 1e-12);

        // Exact-fit batch: zero loss and zero gradient (params unchanged
        // even with a real learning rate).
        let batch_fit = vec![(dvector![0.3], 0.5, dvector![2.0])];
        let mut opt2 = Adam::new(n, 0.1);
        let before = amor.params_flat();
        let loss_fit = train_amortizer(&mut amor, &mut opt2, &batch_fit);
        assert_eq!(loss_fit, 0.0);
        assert_eq!(amor.params_flat(), before);
        assert!(loss_fit >= 0.0);
    }

    #[test]
    fn amortizer_training_reduces_prediction_error() {
        let a = dmatrix![1.6, 0.0; 0.0, 0.7];
        let psi = QuadraticPotential::new(a, dvector![0.3, -0.2], 0.0).unwrap();
        let opts = SubproblemOptions::default();
        let mut r = rng(16);
        let mut amor = AmortizerNet::new(2, &[16, 16], &mut r);
        let mut opt = Adam::new(amor.param_count(), 1e-2);

        let window = 10;
        let mut window_means = Vec::new();
        let mut acc = 0.0;
        for i in 0..60 {
            let batch: Vec<_> = (0..32)
                .map(|_| {
                    let z0 = randn(2, &mut r);
                    let t = r.gen_range(0.05..0.95);
                    let x_t = (1.0 - t) * &z0 + t * psi.grad(&z0);
                    let sol = invert_flow_map(&psi, &x_t, t, &opts);
                    (x_t, t, sol.z0)
                })
                .collect();
            acc += train_amortizer(&mut amor, &mut opt, &batch);
            if (i + 1) % window == 0 {
                window_means.push(acc / window as f64);
                acc = 0.0;
            }
        }
        // Monotone trend over 10-iteration windows.
        for w in window_means.windows(2) {
            assert!(w[1] < w[0], "windows {:?}", window_means);
        }
    }
}
