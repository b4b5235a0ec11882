//! ODE integration for baseline flow fields.
//!
//! Two integrators: classical fixed-step RK4 and the Dormand-Prince 5(4)
//! embedded pair with proportional step control. Both advance dz/dt =
//! u(t, z) from t = 0 to 1 and can report the state at requested
//! intermediate times (needed by the straightness diagnostics).

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum OdeOptions {
    Rk4Fixed {
        steps: usize,
    },
    DormandPrince45 {
        abs_tol: f64,
        rel_tol: f64,
    },
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions::DormandPrince45 { abs_tol: 1e-6, rel_tol: 1e-6 }
    }
}

impl OdeOptions {
    pub fn validate(&self) -> Result<()> {
        match *self {
            OdeOptions::Rk4Fixed { steps } => {
                if steps == 0 {
                    return Err(Error::InvalidConfig {
                        field: "ode.steps".into(),
                        message: "fixed RK4 needs at least one step".into(),
                    });
                }
            }
            OdeOptions::DormandPrince45 { abs_tol, rel_tol } => {
                for (name, tol) in [("abs_tol", abs_tol), ("rel_tol", rel_tol)] {
                    if !(1e-8..=1e-3).contains(&tol) {
                        return Err(Error::InvalidConfig {
                            field: format!("ode.{name}"),
                            message: format!("tolerance {tol:.1e} outside [1e-8, 1e-3]"),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Integrate from t = 0 to t = 1, returning the final state.
pub fn integrate<F>(field: F, x0: &DVector<f64>, opts: &OdeOptions) -> Result<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    Ok(integrate_path(field, x0, &[1.0], opts)?.pop().expect("one output time"))
}

/// Integrate from t = 0, returning the state at each requested time.
///
/// `times` must be non-decreasing and lie in [0, 1].
pub fn integrate_path<F>(
    field: F,
    x0: &DVector<f64>,
    times: &[f64],
    opts: &OdeOptions,
) -> Result<Vec<DVector<f64>>>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    assert!(!times.is_empty(), "need at least one output time");
    assert!(
        times.windows(2).all(|w| w[0] <= w[1]) && times[0] >= 0.0 && *times.last().unwrap() <= 1.0,
        "output times must be sorted within [0, 1]"
    );
    match *opts {
        OdeOptions::Rk4Fixed { steps } => Ok(rk4_path(&field, x0, times, steps)),
        OdeOptions::DormandPrince45 { abs_tol, rel_tol } => {
            dopri45_path(&field, x0, times, abs_tol, rel_tol)
        }
    }
}

fn rk4_path<F>(field: &F, x0: &DVector<f64>, times: &[f64], steps: usize) -> Vec<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let mut out = Vec::with_capacity(times.len());
    let mut t = 0.0;
    let mut z = x0.clone();
    for &target in times {
        let span = target - t;
        if span > 0.0 {
            // Keep the global step density: at least ⌈steps·span⌉ steps
            // over this segment.
            let n = ((steps as f64) * span).ceil().max(1.0) as usize;
            let h = span / n as f64;
            for _ in 0..n {
                z = rk4_step(field, t, &z, h);
                t += h;
            }
            t = target;
        }
        out.push(z.clone());
    }
    out
}

fn rk4_step<F>(field: &F, t: f64, z: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let k1 = field(t, z);
    let k2 = field(t + 0.5 * h, &(z + &k1 * (0.5 * h)));
    let k3 = field(t + 0.5 * h, &(z + &k2 * (0.5 * h)));
    let k4 = field(t + h, &(z + &k3 * h));
    z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

// Dormand-Prince 5(4) coefficients.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] =
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
// b5 − b4: error estimator weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const MIN_STEP: f64 = 1e-14;

fn dopri45_path<F>(
    field: &F,
    x0: &DVector<f64>,
    times: &[f64],
    abs_tol: f64,
    rel_tol: f64,
) -> Result<Vec<DVector<f64>>>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let dim = x0.len();
    let mut out = Vec::with_capacity(times.len());
    let mut t = 0.0;
    let mut z = x0.clone();
    let mut k1 = field(t, &z); // FSAL slot
    let mut h = 0.05f64;

    for &target in times {
        while target - t > 1e-15 {
            h = h.min(target - t);
            if h < MIN_STEP {
                return Err(Error::StepUnderflow { t, h });
            }
            let mut k = Vec::with_capacity(7);
            k.push(k1.clone());
            for s in 1..7 {
                let mut zs = z.clone();
                for (j, kj) in k.iter().enumerate() {
                    zs.axpy(h * A[s][j], kj, 1.0);
                }
                k.push(field(t + C[s] * h, &zs));
            }
            let mut z_new = z.clone();
            for (j, kj) in k.iter().enumerate() {
                z_new.axpy(h * B5[j], kj, 1.0);
            }
            let mut err_vec = DVector::zeros(dim);
            for (j, kj) in k.iter().enumerate() {
                err_vec.axpy(h * E[j], kj, 1.0);
            }
            let mut err: f64 = 0.0;
            for i in 0..dim {
                let scale = abs_tol + rel_tol * z[i].abs().max(z_new[i].abs());
                err += (err_vec[i] / scale).powi(2);
            }
            err = (err / dim as f64).sqrt();

            if !err.is_finite() {
                h *= 0.25;
                continue;
            }
            if err <= 1.0 {
                t += h;
                z = z_new;
                k1 = k.pop().expect("7 stages"); // FSAL: k7 at (t+h, z_new)
                let factor = if err == 0.0 { 5.0 } else { 0.9 * err.powf(-0.2) };
                h *= factor.clamp(0.2, 5.0);
            } else {
                h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            }
        }
        out.push(z.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn constant_field_is_exact_for_both_methods() {
        // Zero discretization error on constant fields; only f64
        // accumulation rounding remains.
        let c = dvector![0.7, -1.3];
        let x0 = dvector![1.0, 2.0];
        for opts in [
            OdeOptions::Rk4Fixed { steps: 10 },
            OdeOptions::DormandPrince45 { abs_tol: 1e-6, rel_tol: 1e-6 },
        ] {
            let end = integrate(|_, _| c.clone(), &x0, &opts).unwrap();
            assert!((end - (&x0 + &c)).abs().max() < 1e-12, "{opts:?}");
        }
    }

    #[test]
    fn linear_field_matches_exponential() {
        let x0 = dvector![1.0, -2.0];
        let opts = OdeOptions::DormandPrince45 { abs_tol: 1e-8, rel_tol: 1e-8 };
        let end = integrate(|_, x| x.clone(), &x0, &opts).unwrap();
        let expect = &x0 * std::f64::consts::E;
        let rel = (&end - &expect).norm() / expect.norm();
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn rk4_order_four_under_step_halving() {
        let x0 = dvector![1.0];
        let exact = std::f64::consts::E;
        let err = |steps: usize| {
            let end =
                integrate(|_, x| x.clone(), &x0, &OdeOptions::Rk4Fixed { steps }).unwrap();
            (end[0] - exact).abs()
        };
        let ratio = err(16) / err(32);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn path_times_are_honored() {
        let x0 = dvector![0.0];
        let times = [0.0, 0.25, 0.5, 0.75, 1.0];
        for opts in [
            OdeOptions::Rk4Fixed { steps: 64 },
            OdeOptions::DormandPrince45 { abs_tol: 1e-8, rel_tol: 1e-8 },
        ] {
            // dz/dt = 1 ⇒ z(t) = t.
            let path = integrate_path(|_, _| dvector![1.0], &x0, &times, &opts).unwrap();
            for (z, t) in path.iter().zip(times) {
                assert!((z[0] - t).abs() < 1e-9, "{opts:?} at t={t}");
            }
        }
    }

    #[test]
    fn finite_time_blowup_underflows_step() {
        // dz/dt = z² from z(0) = 2 blows up at t = 0.5.
        let res = integrate(
            |_, x: &DVector<f64>| x.component_mul(x),
            &dvector![2.0],
            &OdeOptions::DormandPrince45 { abs_tol: 1e-6, rel_tol: 1e-6 },
        );
        assert!(matches!(res, Err(Error::StepUnderflow { .. })));
    }

    #[test]
    fn tolerance_validation() {
        assert!(OdeOptions::DormandPrince45 { abs_tol: 1e-2, rel_tol: 1e-6 }
            .validate()
            .is_err());
        assert!(OdeOptions::DormandPrince45 { abs_tol: 1e-9, rel_tol: 1e-6 }
            .validate()
            .is_err());
        assert!(OdeOptions::Rk4Fixed { steps: 0 }.validate().is_err());
        assert!(OdeOptions::default().validate().is_ok());
    }
}
