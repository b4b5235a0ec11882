//! Experiment configuration and checkpoint containers.
//!
//! Configs are TOML (JSON accepted by extension) with a schema version;
//! every run writes a resolved snapshot next to its outputs so the run
//! can be reproduced from the snapshot alone. Checkpoints are
//! self-describing JSON: architecture metadata plus the flattened
//! parameter vector, versioned.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{FieldOptimizer, ScalarTimeField, TimeField};
use crate::benchmark::TaskDescriptor;
use crate::error::{Error, Result};
use crate::net::Activation;
use crate::ode::OdeOptions;
use crate::plans::PlanKind;
use crate::potential::{IcnnPotential, MlpPotential, Potential, QuadraticPotential, TrainablePotential};
use crate::trainer::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Default, Clone)]
pub struct CliOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
}
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ofm,
    Fm,
    Otcfm,
    Rf,
    Crf,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Ofm => "ofm",
            Method::Fm => "fm",
            Method::Otcfm => "otcfm",
            Method::Rf => "rf",
            Method::Crf => "crf",
        }
    }
}

/// Which family parametrizes the potential in the convex trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PotentialKind {
    Icnn,
    /// Unconstrained MLP; supported as an experiment, no convergence
    /// claim.
    Mlp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OfmSection {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub potential: PotentialKind,
}

impl Default for OfmSection {
    fn default() -> Self {
        OfmSection {
            train: TrainConfig::default(),
            hidden: vec![64, 64],
            activation: Activation::Softplus,
            potential: PotentialKind::Icnn,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: FieldOptimizer,
    pub plan: PlanKind,
    pub mb_size: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Rectification rounds (rf/crf); the first training pass counts as
    /// round zero.
    pub rounds: usize,
    pub pool_size: usize,
    pub ode: OdeOptions,
    pub log_interval: usize,
}

impl Default for FieldSection {
    fn default() -> Self {
        FieldSection {
            iterations: 2000,
            batch_size: 256,
            learning_rate: 1e-3,
            optimizer: FieldOptimizer::RmsProp,
            plan: PlanKind::Independent,
            mb_size: 64,
            hidden: vec![128, 128, 64],
            activation: Activation::Relu,
            rounds: 2,
            pool_size: 8192,
            ode: OdeOptions::default(),
            log_interval: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotSection {
    pub scatter: bool,
    pub trajectories: bool,
    pub loss: bool,
}

impl Default for PlotSection {
    fn default() -> Self {
        PlotSection { scatter: false, trajectories: false, loss: false }
    }
}

/// Full experiment description as read from disk. The `method` field
/// stays a string until validation so unknown tags produce a
/// field-level error instead of a parser backtrace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub method: String,
    pub task: TaskDescriptor,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub ofm: OfmSection,
    #[serde(default)]
    pub field: FieldSection,
    #[serde(default)]
    pub plots: PlotSection,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)?,
            _ => toml::from_str(&text)?,
        };
        Ok(cfg)
    }

    pub fn method(&self) -> Result<Method> {
        match self.method.as_str() {
            "ofm" => Ok(Method::Ofm),
            "fm" => Ok(Method::Fm),
            "otcfm" => Ok(Method::Otcfm),
            "rf" => Ok(Method::Rf),
            "crf" => Ok(Method::Crf),
            other => Err(Error::InvalidConfig {
                field: "method".into(),
                message: format!(
                    "unknown method `{other}`; expected one of ofm, fm, otcfm, rf, crf"
                ),
            }),
        }
    }

    /// Full validation before any compute.
    pub fn validate(&self) -> Result<Method> {
        if self.version != CONFIG_VERSION {
            return Err(Error::InvalidConfig {
                field: "version".into(),
                message: format!("schema version {} unsupported (expected {CONFIG_VERSION})", self.version),
            });
        }
        let method = self.method()?;
        match method {
            Method::Ofm => {
                self.ofm.train.validate()?;
                if self.ofm.hidden.is_empty() {
                    return Err(Error::InvalidConfig {
                        field: "ofm.hidden".into(),
                        message: "need at least one hidden layer".into(),
                    });
                }
            }
            Method::Otcfm => {
                if self.field.plan != PlanKind::Minibatch {
                    return Err(Error::InvalidConfig {
                        field: "field.plan".into(),
                        message: "otcfm is flow matching over the minibatch plan; set plan = \"minibatch\"".into(),
                    });
                }
                self.validate_field()?;
            }
            Method::Fm | Method::Rf | Method::Crf => self.validate_field()?,
        }
        Ok(method)
    }

    fn validate_field(&self) -> Result<()> {
        self.field.ode.validate()?;
        if self.field.hidden.is_empty() {
            return Err(Error::InvalidConfig {
                field: "field.hidden".into(),
                message: "need at least one hidden layer".into(),
            });
        }
        if self.field.batch_size == 0 {
            return Err(Error::InvalidConfig {
                field: "field.batch_size".into(),
                message: "must be >= 1".into(),
            });
        }
        if self.field.log_interval == 0 {
            return Err(Error::InvalidConfig {
                field: "field.log_interval".into(),
                message: "must be >= 1".into(),
            });
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Self-describing model container.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelCheckpoint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelCheckpoint {
    Icnn { dim: usize, hidden: Vec<usize>, activation: Activation, theta: Vec<f64> },
    MlpPotential { dim: usize, hidden: Vec<usize>, activation: Activation, theta: Vec<f64> },
    Quadratic { a: Vec<Vec<f64>>, b: Vec<f64>, c: f64 },
    TimeField { dim: usize, hidden: Vec<usize>, activation: Activation, theta: Vec<f64> },
    ScalarTimeField { dim: usize, hidden: Vec<usize>, activation: Activation, theta: Vec<f64> },
}

impl Checkpoint {
    pub fn new(model: ModelCheckpoint) -> Self {
        Checkpoint { format_version: CHECKPOINT_VERSION, model }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    pub fn dim(&self) -> usize {
        match &self.model {
            ModelCheckpoint::Icnn { dim, .. }
            | ModelCheckpoint::MlpPotential { dim, .. }
            | ModelCheckpoint::TimeField { dim, .. }
            | ModelCheckpoint::ScalarTimeField { dim, .. } => *dim,
            ModelCheckpoint::Quadratic { b, .. } => b.len(),
        }
    }

    pub fn from_icnn(p: &IcnnPotential) -> Self {
        Checkpoint::new(ModelCheckpoint::Icnn {
            dim: p.dim(),
            hidden: p.hidden().to_vec(),
            activation: p.activation(),
            theta: p.params_flat().as_slice().to_vec(),
        })
    }

    pub fn from_mlp_potential(p: &MlpPotential) -> Self {
        Checkpoint::new(ModelCheckpoint::MlpPotential {
            dim: p.dim(),
            hidden: p.hidden().to_vec(),
            activation: p.activation(),
            theta: p.params_flat().as_slice().to_vec(),
        })
    }

    pub fn from_time_field(f: &TimeField) -> Self {
        use crate::baselines::{TrainableField, VelocityField};
        Checkpoint::new(ModelCheckpoint::TimeField {
            dim: f.dim(),
            hidden: f.hidden().to_vec(),
            activation: f.activation(),
            theta: f.params_flat().as_slice().to_vec(),
        })
    }

    pub fn from_scalar_time_field(f: &ScalarTimeField) -> Self {
        use crate::baselines::{TrainableField, VelocityField};
        Checkpoint::new(ModelCheckpoint::ScalarTimeField {
            dim: f.dim(),
            hidden: f.hidden().to_vec(),
            activation: f.activation(),
            theta: f.params_flat().as_slice().to_vec(),
        })
    }

    pub fn build_icnn(&self) -> Result<IcnnPotential> {
        match &self.model {
            ModelCheckpoint::Icnn { dim, hidden, activation, theta } => {
                let mut p = IcnnPotential::new(*dim, hidden, *activation, &mut crate::rng(0));
                set_params_checked(&mut p, theta)?;
                Ok(p)
            }
            _ => Err(Error::Checkpoint("not a convex-network checkpoint".into())),
        }
    }

    pub fn build_time_field(&self) -> Result<TimeField> {
        use crate::baselines::TrainableField;
        match &self.model {
            ModelCheckpoint::TimeField { dim, hidden, activation, theta } => {
                let mut f = TimeField::new(*dim, hidden, *activation, &mut crate::rng(0));
                if f.param_count() != theta.len() {
                    return Err(Error::Checkpoint(param_len_msg(f.param_count(), theta.len())));
                }
                f.set_params_flat(&nalgebra::DVector::from_vec(theta.clone()));
                Ok(f)
            }
            _ => Err(Error::Checkpoint("not a time-field checkpoint".into())),
        }
    }

    pub fn build_scalar_time_field(&self) -> Result<ScalarTimeField> {
        use crate::baselines::TrainableField;
        match &self.model {
            ModelCheckpoint::ScalarTimeField { dim, hidden, activation, theta } => {
                let mut f = ScalarTimeField::new(*dim, hidden, *activation, &mut crate::rng(0));
                if f.param_count() != theta.len() {
                    return Err(Error::Checkpoint(param_len_msg(f.param_count(), theta.len())));
                }
                f.set_params_flat(&nalgebra::DVector::from_vec(theta.clone()));
                Ok(f)
            }
            _ => Err(Error::Checkpoint("not a scalar-field checkpoint".into())),
        }
    }

    /// Rebuild any potential-family checkpoint as a trait object.
    pub fn build_potential(&self) -> Result<Box<dyn TrainablePotential>> {
        match &self.model {
            ModelCheckpoint::Icnn { .. } => Ok(Box::new(self.build_icnn()?)),
            ModelCheckpoint::MlpPotential { dim, hidden, activation, theta } => {
                let mut p = MlpPotential::new(*dim, hidden, *activation, &mut crate::rng(0));
                set_params_checked(&mut p, theta)?;
                Ok(Box::new(p))
            }
            ModelCheckpoint::Quadratic { a, b, c } => {
                let d = b.len();
                if a.len() != d || a.iter().any(|row| row.len() != d) {
                    return Err(Error::Checkpoint("quadratic matrix shape mismatch".into()));
                }
                let mat = nalgebra::DMatrix::from_fn(d, d, |i, j| a[i][j]);
                Ok(Box::new(QuadraticWrapper(QuadraticPotential::new(
                    mat,
                    nalgebra::DVector::from_vec(b.clone()),
                    *c,
                )?)))
            }
            _ => Err(Error::Checkpoint("checkpoint holds a field, not a potential".into())),
        }
    }
}

fn set_params_checked<P: TrainablePotential>(p: &mut P, theta: &[f64]) -> Result<()> {
    if p.param_count() != theta.len() {
        return Err(Error::Checkpoint(param_len_msg(p.param_count(), theta.len())));
    }
    p.set_params_flat(&nalgebra::DVector::from_vec(theta.to_vec()));
    Ok(())
}

fn param_len_msg(expected: usize, got: usize) -> String {
    format!("parameter length {got} does not match architecture ({expected})")
}

/// Quadratic checkpoints behave as frozen trainables (no parameters to
/// optimize; useful for evaluating manufactured ground truth with the
/// same tooling).
#[derive(Debug, Clone)]
struct QuadraticWrapper(QuadraticPotential);

impl crate::potential::Potential for QuadraticWrapper {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn eval(&self, x: &nalgebra::DVector<f64>) -> f64 {
        self.0.eval(x)
    }
    fn grad(&self, x: &nalgebra::DVector<f64>) -> nalgebra::DVector<f64> {
        self.0.grad(x)
    }
    fn hvp(&self, x: &nalgebra::DVector<f64>, v: &nalgebra::DVector<f64>) -> nalgebra::DVector<f64> {
        self.0.hvp(x, v)
    }
    fn hessian(&self, x: &nalgebra::DVector<f64>) -> Result<nalgebra::DMatrix<f64>> {
        self.0.hessian(x)
    }
}

impl TrainablePotential for QuadraticWrapper {
    fn param_count(&self) -> usize {
        0
    }
    fn params_flat(&self) -> nalgebra::DVector<f64> {
        nalgebra::DVector::zeros(0)
    }
    fn set_params_flat(&mut self, _theta: &nalgebra::DVector<f64>) {}
    fn param_grad_directional(
        &self,
        _x: &nalgebra::DVector<f64>,
        _v: &nalgebra::DVector<f64>,
    ) -> nalgebra::DVector<f64> {
        nalgebra::DVector::zeros(0)
    }
    fn project_convex(&mut self) {}
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_toml_parses_with_defaults() {
        let text = r#"
method = "ofm"

[task]
kind = "gaussian-ot"
dim = 2
seed = 3
"#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.validate().unwrap(), Method::Ofm);
        assert_eq!(cfg.version, CONFIG_VERSION);
        assert_eq!(cfg.ofm.train.log_interval, 50);
    }

    #[test]
    fn unknown_method_names_the_field() {
        let text = r#"
method = "diffusion"

[task]
kind = "gaussian-ot"
dim = 2
seed = 3
"#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        match cfg.validate() {
            Err(Error::InvalidConfig { field, message }) => {
                assert_eq!(field, "method");
                assert!(message.contains("diffusion"));
            }
            other => panic!("expected InvalidConfig, got {other:?}"),
        }
    }

    #[test]
    fn otcfm_requires_minibatch_plan() {
        let text = r#"
method = "otcfm"

[task]
kind = "eight-gaussians"
radius = 4.0
sigma = 0.3
"#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig { field, .. }) if field == "field.plan"));
    }

    #[test]
    fn snapshot_roundtrips() {
        let text = r#"
method = "fm"
seed = 9

[task]
kind = "eight-gaussians"
radius = 4.0
sigma = 0.3

[field]
iterations = 7
batch_size = 4
"#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        let snap = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&snap).unwrap();
        assert_eq!(back.seed, 9);
        assert_eq!(back.field.iterations, 7);
        assert_eq!(back.field.batch_size, 4);
        assert_eq!(back.method, "fm");
    }

    #[test]
    fn json_configs_load_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"method": "ofm", "task": {"kind": "gaussian-ot", "dim": 2, "seed": 1}}"#,
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.validate().unwrap(), Method::Ofm);
    }

    #[test]
    fn checkpoint_roundtrip_icnn() {
        let mut r = crate::rng(5);
        let p = IcnnPotential::new(2, &[4, 3], Activation::Softplus, &mut r);
        let ckpt = Checkpoint::from_icnn(&p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let p2 = loaded.build_icnn().unwrap();
        let x = nalgebra::dvector![0.4, -0.9];
        assert_eq!(p.grad(&x), p2.grad(&x));
    }

    #[test]
    fn checkpoint_rejects_length_mismatch() {
        let mut r = crate::rng(6);
        let p = IcnnPotential::new(2, &[4], Activation::Celu, &mut r);
        let mut ckpt = Checkpoint::from_icnn(&p);
        if let ModelCheckpoint::Icnn { theta, .. } = &mut ckpt.model {
            theta.pop();
        }
        assert!(matches!(ckpt.build_icnn(), Err(Error::Checkpoint(_))));
    }
}
