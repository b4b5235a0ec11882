//! Feed-forward network engine with exact derivatives.
//!
//! One layer stack serves every network in the crate: the convex potential
//! (with extra input injections per layer), the time-conditioned baseline
//! fields, and the amortized initializer. Derivatives are hand-rolled
//! layer sweeps rather than a general tape:
//!
//! - reverse sweep over the primal pass gives input gradients and
//!   parameter gradients (`vjp`),
//! - a dual-number channel along a direction `v` carried through the
//!   forward pass gives the directional derivative (`forward_tangent`),
//! - a reverse sweep over the tangent output differentiates
//!   `⟨v, ∇f(x)⟩` with respect to the input (Hessian-vector product) and
//!   with respect to the parameters (`tangent_vjp`).
//!
//! All arithmetic is f64; lower precision makes the finite-difference
//! checks in the test suite meaningless.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Convex, non-decreasing scalar activations.
///
/// `Celu` (α = 1) and `Relu` have piecewise second derivatives; the
/// linear branch (x ≥ 0 for CELU, everywhere for ReLU) contributes 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softplus,
    Celu,
    Relu,
}

impl Activation {
    #[inline]
    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => softplus(x),
            Activation::Celu => {
                if x >= 0.0 {
                    x
                } else {
                    x.exp() - 1.0
                }
            }
            Activation::Relu => x.max(0.0),
        }
    }

    #[inline]
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => logistic(x),
            Activation::Celu => {
                if x >= 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    #[inline]
    pub fn second_deriv(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => {
                let s = logistic(x);
                s * (1.0 - s)
            }
            Activation::Celu => {
                if x >= 0.0 {
                    0.0
                } else {
                    x.exp()
                }
            }
            Activation::Relu => 0.0,
        }
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) without overflow on either tail.
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scalar primal value plus its directional derivative along a fixed
/// direction, as carried by the dual-number channel of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentState {
    pub value: f64,
    pub tangent: f64,
}

/// One affine layer `pre = W a + U x₀ + b`, optionally activated.
///
/// `inject` feeds the stack input `x₀` into the layer directly; the
/// convex potential uses it on every hidden layer, plain MLPs leave it
/// `None`. `act = None` marks a linear (output) layer.
#[derive(Debug, Clone)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub inject: Option<DMatrix<f64>>,
    pub bias: DVector<f64>,
    pub act: Option<Activation>,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.inject.as_ref().map_or(0, |m| m.len()) + self.bias.len()
    }
}

/// Cached primal pass: `acts[0]` is the input, `acts[l+1]` the output of
/// layer `l` (post-activation), `pres[l]` its pre-activation.
pub struct ForwardPass {
    pub acts: Vec<DVector<f64>>,
    pub pres: Vec<DVector<f64>>,
}

impl ForwardPass {
    pub fn output(&self) -> &DVector<f64> {
        self.acts.last().expect("non-empty stack")
    }
}

/// Primal pass plus the dual-number channel along one input direction.
pub struct TangentPass {
    pub primal: ForwardPass,
    pub dacts: Vec<DVector<f64>>,
    pub dpres: Vec<DVector<f64>>,
}

impl TangentPass {
    /// Directional derivative of the scalar output along the seeded direction.
    pub fn tangent_out(&self) -> f64 {
        let d = self.dacts.last().expect("non-empty stack");
        assert_eq!(d.len(), 1, "tangent_out requires a scalar stack");
        d[0]
    }
}

/// Per-layer parameter gradients, same shapes as the layers.
pub struct StackGrads {
    pub weight: Vec<DMatrix<f64>>,
    pub inject: Vec<Option<DMatrix<f64>>>,
    pub bias: Vec<DVector<f64>>,
}

impl StackGrads {
    fn zeros_like(stack: &Stack) -> Self {
        StackGrads {
            weight: stack
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
            inject: stack
                .layers
                .iter()
                .map(|l| l.inject.as_ref().map(|m| DMatrix::zeros(m.nrows(), m.ncols())))
                .collect(),
            bias: stack.layers.iter().map(|l| DVector::zeros(l.bias.len())).collect(),
        }
    }

    /// Flatten into the same order as [`Stack::params_flat`].
    pub fn flat(&self) -> DVector<f64> {
        let mut out = Vec::new();
        for i in 0..self.weight.len() {
            out.extend_from_slice(self.weight[i].as_slice());
            if let Some(m) = &self.inject[i] {
                out.extend_from_slice(m.as_slice());
            }
            out.extend_from_slice(self.bias[i].as_slice());
        }
        DVector::from_vec(out)
    }
}

/// A feed-forward stack of [`Layer`]s.
#[derive(Debug, Clone)]
pub struct Stack {
    pub layers: Vec<Layer>,
}

impl Stack {
    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty stack").out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Parameters flattened layer by layer: weight, inject (if any), bias,
    /// each in nalgebra's column-major element order.
    pub fn params_flat(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            if let Some(m) = &l.inject {
                out.extend_from_slice(m.as_slice());
            }
            out.extend_from_slice(l.bias.as_slice());
        }
        DVector::from_vec(out)
    }

    pub fn set_params_flat(&mut self, theta: &DVector<f64>) {
        assert_eq!(theta.len(), self.param_count(), "parameter length mismatch");
        let mut ofs = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&theta.as_slice()[ofs..ofs + dst.len()]);
            ofs += dst.len();
        };
        for l in &mut self.layers {
            take(l.weight.as_mut_slice());
            if let Some(m) = &mut l.inject {
                take(m.as_mut_slice());
            }
            take(l.bias.as_mut_slice());
        }
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.input_dim(), "input dimension mismatch");
        let mut a = x.clone();
        for l in &self.layers {
            let mut pre = &l.weight * &a + &l.bias;
            if let Some(u) = &l.inject {
                pre += u * x;
            }
            a = match l.act {
                Some(act) => pre.map(|p| act.value(p)),
                None => pre,
            };
        }
        a
    }

    pub fn forward_full(&self, x: &DVector<f64>) -> ForwardPass {
        assert_eq!(x.len(), self.input_dim(), "input dimension mismatch");
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pres = Vec::with_capacity(self.layers.len());
        acts.push(x.clone());
        for l in &self.layers {
            let mut pre = &l.weight * acts.last().unwrap() + &l.bias;
            if let Some(u) = &l.inject {
                pre += u * x;
            }
            let a = match l.act {
                Some(act) => pre.map(|p| act.value(p)),
                None => pre.clone(),
            };
            pres.push(pre);
            acts.push(a);
        }
        ForwardPass { acts, pres }
    }

    /// Forward pass carrying a dual-number channel seeded with `v`.
    ///
    /// The tangent of the output equals the Jacobian-vector product
    /// `J(x)·v`; for a scalar stack that is `⟨∇f(x), v⟩`.
    pub fn forward_tangent(&self, x: &DVector<f64>, v: &DVector<f64>) -> TangentPass {
        assert_eq!(x.len(), v.len(), "tangent dimension mismatch");
        let primal = self.forward_full(x);
        let mut dacts = Vec::with_capacity(self.layers.len() + 1);
        let mut dpres = Vec::with_capacity(self.layers.len());
        dacts.push(v.clone());
        for (i, l) in self.layers.iter().enumerate() {
            let mut dpre = &l.weight * dacts.last().unwrap();
            if let Some(u) = &l.inject {
                dpre += u * v;
            }
            let da = match l.act {
                Some(act) => {
                    DVector::from_fn(dpre.len(), |r, _| act.deriv(self.pre(&primal, i, r)) * dpre[r])
                }
                None => dpre.clone(),
            };
            dpres.push(dpre);
            dacts.push(da);
        }
        TangentPass { primal, dacts, dpres }
    }

    #[inline]
    fn pre(&self, fwd: &ForwardPass, layer: usize, row: usize) -> f64 {
        fwd.pres[layer][row]
    }

    /// Reverse sweep over the primal pass.
    ///
    /// Returns the parameter gradients and the input gradient of
    /// `⟨seed, output⟩`.
    pub fn vjp(&self, fwd: &ForwardPass, seed: &DVector<f64>) -> (StackGrads, DVector<f64>) {
        assert_eq!(seed.len(), self.output_dim(), "seed dimension mismatch");
        let mut grads = StackGrads::zeros_like(self);
        let mut xbar = DVector::zeros(self.input_dim());
        let mut abar = seed.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let prebar = match l.act {
                Some(act) => DVector::from_fn(abar.len(), |r, _| act.deriv(fwd.pres[i][r]) * abar[r]),
                None => abar.clone(),
            };
            grads.weight[i].ger(1.0, &prebar, &fwd.acts[i], 1.0);
            if let Some(g) = &mut grads.inject[i] {
                g.ger(1.0, &prebar, &fwd.acts[0], 1.0);
            }
            grads.bias[i] += &prebar;
            if let Some(u) = &l.inject {
                xbar.gemv_tr(1.0, u, &prebar, 1.0);
            }
            abar = l.weight.transpose() * &prebar;
        }
        xbar += &abar;
        (grads, xbar)
    }

    /// Gradient of a scalar stack with respect to its input.
    pub fn grad_input(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(self.output_dim(), 1, "grad_input requires a scalar stack");
        let fwd = self.forward_full(x);
        self.vjp(&fwd, &DVector::from_element(1, 1.0)).1
    }

    /// Reverse sweep over the tangent output of a scalar stack.
    ///
    /// Differentiates `S = ⟨v, ∇f(x)⟩` (the tangent output of
    /// [`Stack::forward_tangent`]) treating `v` as a constant. Returns
    /// `(dS/dθ, dS/dx)`; the second component is the Hessian-vector
    /// product `∇²f(x)·v`.
    pub fn tangent_vjp(&self, tp: &TangentPass) -> (StackGrads, DVector<f64>) {
        assert_eq!(self.output_dim(), 1, "tangent_vjp requires a scalar stack");
        let fwd = &tp.primal;
        let v = &tp.dacts[0];
        let mut grads = StackGrads::zeros_like(self);
        let mut xbar = DVector::zeros(self.input_dim());
        // Two adjoint channels per node: abar for the primal activations,
        // dabar for the tangent activations.
        let mut abar = DVector::zeros(self.output_dim());
        let mut dabar = DVector::from_element(1, 1.0);
        for (i, l) in self.layers.iter().enumerate().rev() {
            let (prebar, dprebar) = match l.act {
                Some(act) => {
                    let prebar = DVector::from_fn(abar.len(), |r, _| {
                        act.deriv(fwd.pres[i][r]) * abar[r]
                            + act.second_deriv(fwd.pres[i][r]) * tp.dpres[i][r] * dabar[r]
                    });
                    let dprebar =
                        DVector::from_fn(dabar.len(), |r, _| act.deriv(fwd.pres[i][r]) * dabar[r]);
                    (prebar, dprebar)
                }
                None => (abar.clone(), dabar.clone()),
            };
            // pre = W a + U x + b
            grads.weight[i].ger(1.0, &prebar, &fwd.acts[i], 1.0);
            grads.bias[i] += &prebar;
            if let Some(g) = &mut grads.inject[i] {
                g.ger(1.0, &prebar, &fwd.acts[0], 1.0);
            }
            if let Some(u) = &l.inject {
                xbar.gemv_tr(1.0, u, &prebar, 1.0);
            }
            // dpre = W da + U v (v constant: no xbar term)
            grads.weight[i].ger(1.0, &dprebar, &tp.dacts[i], 1.0);
            if let Some(g) = &mut grads.inject[i] {
                g.ger(1.0, &dprebar, v, 1.0);
            }
            abar = l.weight.transpose() * &prebar;
            dabar = l.weight.transpose() * &dprebar;
        }
        xbar += &abar;
        (grads, xbar)
    }
}

/// Glorot-style normal init for a free matrix.
pub fn glorot<R: Rng>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> DMatrix<f64> {
    let std = gain * (2.0 / (rows + cols) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        std * z
    })
}

/// Uniform non-negative init for a constrained matrix.
pub fn nonneg_uniform<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(0.0..scale))
}

/// Plain fully-connected network: hidden layers with one activation,
/// linear output. Used for the baseline fields and the amortizer.
pub fn mlp<R: Rng>(dims: &[usize], act: Activation, rng: &mut R) -> Stack {
    assert!(dims.len() >= 2, "mlp needs input and output dims");
    let layers = (0..dims.len() - 1)
        .map(|i| Layer {
            weight: glorot(dims[i + 1], dims[i], 1.0, rng),
            inject: None,
            bias: DVector::zeros(dims[i + 1]),
            act: if i + 2 == dims.len() { None } else { Some(act) },
        })
        .collect();
    Stack { layers }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn finite_diff_grad(stack: &Stack, x: &DVector<f64>, h: f64) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            (stack.forward(&xp)[0] - stack.forward(&xm)[0]) / (2.0 * h)
        })
    }

    fn test_stack(act: Activation, seed: u64) -> Stack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = mlp(&[3, 5, 4, 1], act, &mut rng);
        // Non-trivial biases so activation second derivatives are exercised.
        for l in &mut s.layers {
            l.bias = DVector::from_fn(l.bias.len(), |_, _| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                0.3 * z
            });
        }
        s
    }

    #[test]
    fn activation_values() {
        assert!((Activation::Softplus.value(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(Activation::Relu.value(-1.0), 0.0);
        assert_eq!(Activation::Celu.value(2.0), 2.0);
        assert!((Activation::Celu.value(-1.0) - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        // Large-argument softplus stays finite and close to identity.
        assert!((Activation::Softplus.value(800.0) - 800.0).abs() < 1e-12);
        assert!(Activation::Softplus.value(-800.0) >= 0.0);
    }

    #[test]
    fn activation_derivs_match_finite_differences() {
        let h = 1e-6;
        for act in [Activation::Softplus, Activation::Celu] {
            for &x in &[-2.3, -0.7, 0.4, 1.9] {
                let fd1 = (act.value(x + h) - act.value(x - h)) / (2.0 * h);
                let fd2 = (act.deriv(x + h) - act.deriv(x - h)) / (2.0 * h);
                assert!((act.deriv(x) - fd1).abs() < 1e-8, "{act:?} deriv at {x}");
                assert!((act.second_deriv(x) - fd2).abs() < 1e-7, "{act:?} second at {x}");
            }
        }
    }

    #[test]
    fn grad_input_matches_finite_differences() {
        let s = test_stack(Activation::Softplus, 1);
        let x = DVector::from_vec(vec![0.3, -0.8, 1.1]);
        let g = s.grad_input(&x);
        let fd = finite_diff_grad(&s, &x, 1e-5);
        assert!((g - fd).abs().max() < 1e-8);
    }

    #[test]
    fn tangent_equals_grad_dot_v() {
        let s = test_stack(Activation::Celu, 2);
        let x = DVector::from_vec(vec![0.5, 0.2, -0.4]);
        let v = DVector::from_vec(vec![-1.0, 0.7, 0.3]);
        let tp = s.forward_tangent(&x, &v);
        let g = s.grad_input(&x);
        assert!((tp.tangent_out() - g.dot(&v)).abs() < 1e-12);
    }

    #[test]
    fn tangent_vjp_hvp_matches_grad_finite_difference() {
        let s = test_stack(Activation::Softplus, 3);
        let x = DVector::from_vec(vec![0.1, -0.2, 0.6]);
        let v = DVector::from_vec(vec![0.9, -0.5, 0.2]);
        let tp = s.forward_tangent(&x, &v);
        let (_, hv) = s.tangent_vjp(&tp);
        let h = 1e-5;
        let gp = s.grad_input(&(&x + &v * h));
        let gm = s.grad_input(&(&x - &v * h));
        let fd = (gp - gm) / (2.0 * h);
        assert!((hv - fd).abs().max() < 1e-7);
    }

    #[test]
    fn tangent_vjp_params_match_finite_differences() {
        let s = test_stack(Activation::Softplus, 4);
        let x = DVector::from_vec(vec![0.4, 0.1, -0.9]);
        let v = DVector::from_vec(vec![0.2, -0.6, 1.0]);
        let tp = s.forward_tangent(&x, &v);
        let (grads, _) = s.tangent_vjp(&tp);
        let analytic = grads.flat();

        let theta = s.params_flat();
        let h = 1e-6;
        for i in 0..theta.len() {
            let mut sc = s.clone();
            let mut tp_ = theta.clone();
            tp_[i] += h;
            sc.set_params_flat(&tp_);
            let up = sc.forward_tangent(&x, &v).tangent_out();
            let mut tm = theta.clone();
            tm[i] -= h;
            sc.set_params_flat(&tm);
            let dn = sc.forward_tangent(&x, &v).tangent_out();
            let fd = (up - dn) / (2.0 * h);
            assert!(
                (analytic[i] - fd).abs() < 1e-6 * (1.0 + fd.abs()),
                "param {i}: analytic {} vs fd {}",
                analytic[i],
                fd
            );
        }
    }

    #[test]
    fn vjp_params_match_finite_differences() {
        let s = test_stack(Activation::Celu, 5);
        let x = DVector::from_vec(vec![-0.3, 0.8, 0.05]);
        let fwd = s.forward_full(&x);
        let seed = DVector::from_element(1, 1.0);
        let (grads, _) = s.vjp(&fwd, &seed);
        let analytic = grads.flat();

        let theta = s.params_flat();
        let h = 1e-6;
        for i in 0..theta.len() {
            let mut sc = s.clone();
            let mut tp_ = theta.clone();
            tp_[i] += h;
            sc.set_params_flat(&tp_);
            let up = sc.forward(&x)[0];
            let mut tm = theta.clone();
            tm[i] -= h;
            sc.set_params_flat(&tm);
            let dn = sc.forward(&x)[0];
            let fd = (up - dn) / (2.0 * h);
            assert!((analytic[i] - fd).abs() < 1e-7 * (1.0 + fd.abs()), "param {i}");
        }
    }

    #[test]
    fn params_roundtrip() {
        let s = test_stack(Activation::Relu, 6);
        let theta = s.params_flat();
        let mut s2 = test_stack(Activation::Relu, 7);
        s2.set_params_flat(&theta);
        assert_eq!(s2.params_flat(), theta);
    }

    #[test]
    fn tangent_of_constant_is_zero_and_linear_in_v() {
        let s = test_stack(Activation::Softplus, 8);
        let x = DVector::from_vec(vec![0.2, 0.3, -0.1]);
        let zero = DVector::zeros(3);
        assert_eq!(s.forward_tangent(&x, &zero).tangent_out(), 0.0);

        let u = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let w = DVector::from_vec(vec![0.3, 0.3, -0.9]);
        let t_u = s.forward_tangent(&x, &u).tangent_out();
        let t_w = s.forward_tangent(&x, &w).tangent_out();
        let t_mix = s.forward_tangent(&x, &(2.0 * &u - 3.0 * &w)).tangent_out();
        assert!((t_mix - (2.0 * t_u - 3.0 * t_w)).abs() < 1e-10);
    }

    #[test]
    fn injected_layers_differentiate_correctly() {
        // A stack with input injections on the hidden layer, as the convex
        // potential uses.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layers = vec![
            Layer {
                weight: glorot(4, 2, 1.0, &mut rng),
                inject: None,
                bias: DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0]),
                act: Some(Activation::Softplus),
            },
            Layer {
                weight: nonneg_uniform(3, 4, 0.5, &mut rng),
                inject: Some(glorot(3, 2, 1.0, &mut rng)),
                bias: DVector::from_vec(vec![0.05, 0.0, -0.1]),
                act: Some(Activation::Softplus),
            },
            Layer {
                weight: nonneg_uniform(1, 3, 0.5, &mut rng),
                inject: Some(glorot(1, 2, 1.0, &mut rng)),
                bias: DVector::zeros(1),
                act: None,
            },
        ];
        let s = Stack { layers };
        let x = DVector::from_vec(vec![0.7, -0.4]);
        let g = s.grad_input(&x);
        let fd = finite_diff_grad(&s, &x, 1e-5);
        assert!((&g - &fd).abs().max() < 1e-8);

        // Hessian-vector product against finite differences of the gradient.
        let v = DVector::from_vec(vec![0.6, 1.3]);
        let tp = s.forward_tangent(&x, &v);
        let (grads, hv) = s.tangent_vjp(&tp);
        let h = 1e-5;
        let fd_h = (s.grad_input(&(&x + &v * h)) - s.grad_input(&(&x - &v * h))) / (2.0 * h);
        assert!((&hv - &fd_h).abs().max() < 1e-7);

        // Parameter gradients of the tangent output.
        let analytic = grads.flat();
        let theta = s.params_flat();
        let h = 1e-6;
        for i in 0..theta.len() {
            let mut sc = s.clone();
            let mut t = theta.clone();
            t[i] += h;
            sc.set_params_flat(&t);
            let up = sc.forward_tangent(&x, &v).tangent_out();
            t[i] -= 2.0 * h;
            sc.set_params_flat(&t);
            let dn = sc.forward_tangent(&x, &v).tangent_out();
            let fd = (up - dn) / (2.0 * h);
            assert!((analytic[i] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}");
        }
    }
}
