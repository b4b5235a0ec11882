//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The inner solver for the flow-map inversion and convex-conjugate
//! subproblems. Those objectives are (at least) strongly convex, so a
//! modest memory and iteration budget reaches tight gradient tolerances;
//! the solver itself makes no convexity assumption beyond rejecting
//! curvature pairs with non-positive `sᵀy`.

use nalgebra::DVector;
use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    /// Stop when ‖∇F‖ drops below this.
    pub tol_grad: f64,
    /// Outer iteration cap.
    pub max_iters: usize,
    /// Number of curvature pairs kept.
    pub memory: usize,
    /// Treat the run as diverged once ‖x‖ exceeds this, if set.
    pub divergence_norm: Option<f64>,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions { tol_grad: 1e-8, max_iters: 50, memory: 10, divergence_norm: None }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
}

const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;

/// Minimize `f` (returning value and gradient) from `x0`.
pub fn minimize<F>(mut f: F, x0: DVector<f64>, opts: &LbfgsOptions) -> LbfgsOutcome
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut gx) = f(&x);
    let mut pairs: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut gamma = 1.0;

    for iter in 0..opts.max_iters {
        let gnorm = gx.norm();
        if gnorm <= opts.tol_grad {
            return LbfgsOutcome {
                x,
                value: fx,
                grad_norm: gnorm,
                iterations: iter,
                converged: true,
                diverged: false,
            };
        }
        if let Some(bound) = opts.divergence_norm {
            if x.norm() > bound {
                return LbfgsOutcome {
                    x,
                    value: fx,
                    grad_norm: gnorm,
                    iterations: iter,
                    converged: false,
                    diverged: true,
                };
            }
        }

        let mut dir = two_loop(&gx, &pairs, gamma);
        let mut slope = dir.dot(&gx);
        if !slope.is_finite() || slope >= 0.0 {
            // Stale curvature; fall back to steepest descent.
            dir = -&gx;
            slope = -gnorm * gnorm;
            pairs.clear();
            gamma = 1.0;
        }

        match line_search(&mut f, &x, &dir, fx, slope) {
            Some((step, x_new, f_new, g_new)) => {
                let s = &x_new - &x;
                let y = &g_new - &gx;
                let sy = s.dot(&y);
                if sy > 1e-12 * s.norm() * y.norm() {
                    gamma = sy / y.norm_squared();
                    if pairs.len() == opts.memory {
                        pairs.pop_front();
                    }
                    pairs.push_back((s, y, 1.0 / sy));
                }
                let _ = step;
                x = x_new;
                fx = f_new;
                gx = g_new;
            }
            None => {
                // Line search exhausted; the iterate is the best we have.
                return LbfgsOutcome {
                    x,
                    value: fx,
                    grad_norm: gnorm,
                    iterations: iter + 1,
                    converged: gnorm <= opts.tol_grad,
                    diverged: false,
                };
            }
        }
    }

    let gnorm = gx.norm();
    let _ = n;
    LbfgsOutcome {
        x,
        value: fx,
        grad_norm: gnorm,
        iterations: opts.max_iters,
        converged: gnorm <= opts.tol_grad,
        diverged: false,
    }
}

/// Two-loop recursion: apply the implicit inverse-Hessian estimate.
fn two_loop(
    g: &DVector<f64>,
    pairs: &VecDeque<(DVector<f64>, DVector<f64>, f64)>,
    gamma: f64,
) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    q *= gamma;
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    -q
}

/// Best point probed during a line search, returned when the Wolfe
/// conditions are unattainable (machine-precision stalls, unbounded
/// descent rays).
struct ProbeBest {
    alpha: f64,
    x: DVector<f64>,
    f: f64,
    g: DVector<f64>,
}

impl ProbeBest {
    fn consider(slot: &mut Option<ProbeBest>, alpha: f64, x: &DVector<f64>, f: f64, g: &DVector<f64>) {
        let better = slot.as_ref().map_or(true, |b| f < b.f);
        if better {
            *slot = Some(ProbeBest { alpha, x: x.clone(), f, g: g.clone() });
        }
    }
}

/// Strong-Wolfe line search (bracket + zoom).
///
/// Armijo comparisons carry a slack of order machine epsilon so the
/// search keeps moving when function differences drop below f64
/// resolution; the curvature condition is evaluated from gradients and
/// stays meaningful there.
fn line_search<F>(
    f: &mut F,
    x: &DVector<f64>,
    dir: &DVector<f64>,
    f0: f64,
    slope0: f64,
) -> Option<(f64, DVector<f64>, f64, DVector<f64>)>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let eps_f = 1e-15 * (1.0 + f0.abs());
    let mut best: Option<ProbeBest> = None;
    let mut eval = |alpha: f64, best: &mut Option<ProbeBest>| {
        let xa = x + dir * alpha;
        let (fa, ga) = f(&xa);
        let sa = ga.dot(dir);
        if fa.is_finite() {
            ProbeBest::consider(best, alpha, &xa, fa, &ga);
        }
        (xa, fa, ga, sa)
    };

    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut alpha = 1.0;
    let mut result = None;

    for i in 0..20 {
        let (xa, fa, ga, sa) = eval(alpha, &mut best);
        if !fa.is_finite() {
            alpha *= 0.5;
            continue;
        }
        if fa > f0 + WOLFE_C1 * alpha * slope0 + eps_f || (i > 0 && fa >= f_prev + eps_f) {
            result = zoom(&mut eval, &mut best, f0, slope0, eps_f, alpha_prev, f_prev, alpha);
            break;
        }
        if sa.abs() <= -WOLFE_C2 * slope0 {
            result = Some((alpha, xa, fa, ga));
            break;
        }
        if sa >= 0.0 {
            result = zoom(&mut eval, &mut best, f0, slope0, eps_f, alpha, fa, alpha_prev);
            break;
        }
        alpha_prev = alpha;
        f_prev = fa;
        alpha *= 2.0;
    }

    result.or_else(|| {
        // No Wolfe point: fall back to the best probe if it improves on
        // the start (within noise) and actually moved.
        best.filter(|b| b.f <= f0 + eps_f && b.alpha > 0.0)
            .map(|b| (b.alpha, b.x, b.f, b.g))
    })
}

#[allow(clippy::too_many_arguments)]
fn zoom<E>(
    eval: &mut E,
    best: &mut Option<ProbeBest>,
    f0: f64,
    slope0: f64,
    eps_f: f64,
    mut lo: f64,
    mut f_lo: f64,
    mut hi: f64,
) -> Option<(f64, DVector<f64>, f64, DVector<f64>)>
where
    E: FnMut(f64, &mut Option<ProbeBest>) -> (DVector<f64>, f64, DVector<f64>, f64),
{
    for _ in 0..30 {
        if (hi - lo).abs() <= 1e-16 * (1.0 + lo.abs()) {
            return None;
        }
        let alpha = 0.5 * (lo + hi);
        let (xa, fa, ga, sa) = eval(alpha, best);
        if !fa.is_finite() || fa > f0 + WOLFE_C1 * alpha * slope0 + eps_f || fa >= f_lo + eps_f {
            hi = alpha;
        } else {
            if sa.abs() <= -WOLFE_C2 * slope0 {
                return Some((alpha, xa, fa, ga));
            }
            if sa * (hi - lo) >= 0.0 {
                hi = lo;
            }
            lo = alpha;
            f_lo = fa;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use nalgebra::DMatrix;
    use rand::Rng as _;

    #[test]
    fn quadratic_bowl_converges() {
        let opts = LbfgsOptions { tol_grad: 1e-10, max_iters: 100, ..Default::default() };
        let out = minimize(
            |x| {
                let g = DVector::from_vec(vec![2.0 * (x[0] - 3.0), 8.0 * (x[1] + 1.0)]);
                ((x[0] - 3.0).powi(2) + 4.0 * (x[1] + 1.0).powi(2), g)
            },
            DVector::from_vec(vec![10.0, -5.0]),
            &opts,
        );
        assert!(out.converged);
        assert!((out.x[0] - 3.0).abs() < 1e-9);
        assert!((out.x[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn rosenbrock_converges() {
        let opts = LbfgsOptions { tol_grad: 1e-8, max_iters: 200, ..Default::default() };
        let out = minimize(
            |x| {
                let (a, b) = (1.0, 100.0);
                let f = (a - x[0]).powi(2) + b * (x[1] - x[0] * x[0]).powi(2);
                let g = DVector::from_vec(vec![
                    -2.0 * (a - x[0]) - 4.0 * b * (x[1] - x[0] * x[0]) * x[0],
                    2.0 * b * (x[1] - x[0] * x[0]),
                ]);
                (f, g)
            },
            DVector::from_vec(vec![-1.2, 1.0]),
            &opts,
        );
        assert!(out.converged, "grad norm {}", out.grad_norm);
        assert!((out.x[0] - 1.0).abs() < 1e-6);
        assert!((out.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn random_spd_quadratic_matches_linear_solve() {
        let mut r = rng(5);
        let d = 10;
        let m = DMatrix::from_fn(d, d, |_, _| r.sample::<f64, _>(rand_distr::StandardNormal));
        let a = &m * m.transpose() + DMatrix::identity(d, d);
        let b = DVector::from_fn(d, |_, _| r.sample::<f64, _>(rand_distr::StandardNormal));
        let expect = a.clone().cholesky().unwrap().solve(&b);

        let opts = LbfgsOptions { tol_grad: 1e-12, max_iters: 200, ..Default::default() };
        let out = minimize(
            |x| (0.5 * x.dot(&(&a * x)) - b.dot(x), &a * x - &b),
            DVector::zeros(d),
            &opts,
        );
        assert!(out.converged);
        assert!((out.x - expect).norm() < 1e-8);
    }

    #[test]
    fn divergence_bound_reported() {
        // Unbounded below: f = -‖x‖², walks off to infinity.
        let opts = LbfgsOptions {
            tol_grad: 1e-10,
            max_iters: 500,
            divergence_norm: Some(1e3),
            ..Default::default()
        };
        let out = minimize(
            |x| (-x.norm_squared(), -2.0 * x),
            DVector::from_vec(vec![1.0, 1.0]),
            &opts,
        );
        assert!(out.diverged);
        assert!(!out.converged);
    }

    #[test]
    fn zero_iterations_returns_start() {
        let opts = LbfgsOptions { max_iters: 0, ..Default::default() };
        let x0 = DVector::from_vec(vec![2.0]);
        let out = minimize(|x| (x[0] * x[0], DVector::from_vec(vec![2.0 * x[0]])), x0.clone(), &opts);
        assert_eq!(out.x, x0);
        assert_eq!(out.iterations, 0);
    }
}
