//! First-order optimizers on flat parameter vectors, plus the EMA shadow.

use nalgebra::DVector;

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: DVector<f64>,
    v: DVector<f64>,
    t: u64,
}

impl Adam {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: DVector::zeros(param_count),
            v: DVector::zeros(param_count),
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut DVector<f64>, grad: &DVector<f64>) {
        assert_eq!(theta.len(), self.m.len(), "parameter length mismatch");
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            theta[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct RmsProp {
    lr: f64,
    alpha: f64,
    eps: f64,
    v: DVector<f64>,
}

impl RmsProp {
    pub fn new(param_count: usize, lr: f64) -> Self {
        RmsProp { lr, alpha: 0.99, eps: 1e-8, v: DVector::zeros(param_count) }
    }

    pub fn step(&mut self, theta: &mut DVector<f64>, grad: &DVector<f64>) {
        assert_eq!(theta.len(), self.v.len(), "parameter length mismatch");
        for i in 0..theta.len() {
            self.v[i] = self.alpha * self.v[i] + (1.0 - self.alpha) * grad[i] * grad[i];
            theta[i] -= self.lr * grad[i] / (self.v[i].sqrt() + self.eps);
        }
    }
}

/// Exponential moving average of a parameter vector:
/// `shadow ← α·shadow + (1−α)·θ` after every update.
#[derive(Debug, Clone)]
pub struct EmaShadow {
    shadow: DVector<f64>,
    decay: f64,
}

impl EmaShadow {
    pub fn new(init: DVector<f64>, decay: f64) -> Self {
        assert!((0.0..1.0).contains(&decay), "EMA decay must be in [0,1)");
        EmaShadow { shadow: init, decay }
    }

    pub fn update(&mut self, theta: &DVector<f64>) {
        self.shadow = &self.shadow * self.decay + theta * (1.0 - self.decay);
    }

    pub fn shadow(&self) -> &DVector<f64> {
        &self.shadow
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }
}
