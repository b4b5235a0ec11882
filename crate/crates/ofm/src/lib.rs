//! Optimal flow matching for quadratic-cost optimal transport.
//!
//! This crate learns the optimal transport map between two sampled
//! distributions in a single flow-matching minimization by restricting
//! the vector field to gradients of convex potentials. Trajectories of
//! such fields are straight lines by construction, so transporting a
//! point never requires an ODE solve: the map is just the potential
//! gradient. Baseline trainers (vanilla flow matching, minibatch-OT
//! flow matching, rectified flow and its potential-field variant) and a
//! ground-truth benchmark harness are included for comparison.
//!
//! Start with the runnable examples:
//!
//! ```text
//! cargo run --release --example quadratic_task
//! cargo run --release --example eight_gaussians_2d
//! cargo run --release --example identity_checks
//! cargo run --release --example inversion_roundtrip
//! cargo run --release --example plan_invariance
//! cargo run --release --example baselines_compare
//! ```
//!
//! or with the thin CLI binary (`ofm train|eval|check|plot`).

pub mod assignment;
pub mod baselines;
pub mod benchmark;
pub mod config;
pub mod error;
pub mod inversion;
pub mod lbfgs;
pub mod net;
pub mod ode;
pub mod optim;
pub mod plans;
pub mod plot;
pub mod potential;
pub mod run;
pub mod trainer;

pub use error::{Error, Result};
pub use potential::{IcnnPotential, Potential, QuadraticPotential, TrainablePotential};

/// Workspace-wide RNG; seeded everywhere so runs are reproducible.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Build the crate RNG from a seed.
pub fn rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
