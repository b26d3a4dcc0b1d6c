//! Experiment configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//! steps = 2000
//! batch_size = 64
//!
//! [model]
//! input_dim = 8
//! bottom = [32, 16]
//! head_hidden = [8]
//!
//! [task.synthetic]          # or [task.quadratic]
//! tasks = 3
//! input_dim = 8
//! conflict = 0.0
//! kinds = ["binary"]
//!
//! [balancer]
//! name = "multibalance"
//! beta = 1.0
//!
//! [training]
//! gradient_source = "representation"
//! optimizer = "sgd"
//! learning_rate = 0.05
//!
//! [output]
//! records = "out/run.jsonl"
//! ```
//!
//! Every table rejects unknown keys. Omitted keys take the defaults listed
//! on each field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::balancers::{BalancerKind, BalancerParams};
use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, DenseVector};
use crate::model::{ModelArch, TaskKind};
use crate::simplex::{DEFAULT_MIN_NORM_MAX_ITER, DEFAULT_MIN_NORM_TOL};
use crate::tasks::{QuadraticMOOSpec, SyntheticTaskSpec};
use crate::theory::Fault;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds model initialisation and balancer randomness. Task data has its
    /// own seed in the task table.
    #[serde(default)]
    pub seed: u64,
    /// Number of optimisation steps `K`.
    pub steps: usize,
    /// Samples per step (ignored by the quadratic testbed).
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Required for the synthetic workload.
    #[serde(default)]
    pub model: Option<ModelArch>,
    pub task: TaskConfig,
    #[serde(default)]
    pub balancer: BalancerConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub theory: TheoryConfig,
}

fn default_batch_size() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskConfig {
    Synthetic(SyntheticTaskSpec),
    Quadratic(QuadraticConfig),
}

/// `f_i(θ) = ½(θ − c_i)ᵀ A_i (θ − c_i)`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticConfig {
    pub centers: Vec<Vec<f64>>,
    /// One square matrix (list of rows) per task; identity when omitted.
    #[serde(default)]
    pub curvatures: Option<Vec<Vec<Vec<f64>>>>,
    /// Starting point; the origin when omitted.
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
}

impl QuadraticConfig {
    pub fn spec(&self) -> Result<QuadraticMOOSpec> {
        let centers: Vec<DenseVector> = self.centers.iter().map(|c| DenseVector::new(c.clone())).collect();
        match &self.curvatures {
            None => QuadraticMOOSpec::isotropic(centers),
            Some(mats) => {
                let mats = mats
                    .iter()
                    .map(|rows| DenseMatrix::from_rows(rows))
                    .collect::<Result<Vec<_>>>()?;
                QuadraticMOOSpec::new(centers, mats)
            }
        }
    }

    pub fn start(&self) -> Vec<f64> {
        self.theta0
            .clone()
            .unwrap_or_else(|| vec![0.0; self.centers.first().map_or(0, Vec::len)])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BalancerConfig {
    /// `vanilla`, `multibalance`, `mgda`, `moco`, `pcgrad`, `gradvac`,
    /// `graddrop`, `dbmtl`, `imtlg` or `uncertainty`. Default `multibalance`.
    pub name: BalancerKind,
    /// Weight learning rate β (default 1.0).
    pub beta: f64,
    /// Prior pull ρ (default 0.1).
    pub rho: f64,
    /// Moving-average rate γ for norms and tracked gradients (default 0.01).
    pub gamma: f64,
    /// Cosine instead of inner-product weight direction (default true).
    pub cosine_mode: bool,
    /// Prior weights λ₀ (default uniform).
    pub lambda0: Option<Vec<f64>>,
    /// Gradient Vaccine target rate (default 0.01).
    pub vaccine_rate: f64,
    /// Log-variance step for Uncertainty (default: the learning rate).
    pub uncertainty_lr: Option<f64>,
    pub min_norm_tol: f64,
    pub min_norm_max_iter: usize,
}

impl Default for BalancerConfig {
    fn default() -> Self {
        let p = BalancerParams::default();
        Self {
            name: BalancerKind::Multibalance,
            beta: p.beta,
            rho: p.rho,
            gamma: p.gamma,
            cosine_mode: p.cosine_mode,
            lambda0: None,
            vaccine_rate: p.vaccine_rate,
            uncertainty_lr: None,
            min_norm_tol: DEFAULT_MIN_NORM_TOL,
            min_norm_max_iter: DEFAULT_MIN_NORM_MAX_ITER,
        }
    }
}

impl BalancerConfig {
    pub fn params(&self, learning_rate: f64) -> BalancerParams {
        BalancerParams {
            beta: self.beta,
            rho: self.rho,
            gamma: self.gamma,
            cosine_mode: self.cosine_mode,
            lambda0: self.lambda0.clone(),
            vaccine_rate: self.vaccine_rate,
            uncertainty_lr: Some(self.uncertainty_lr.unwrap_or(learning_rate)),
            min_norm_tol: self.min_norm_tol,
            min_norm_max_iter: self.min_norm_max_iter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientSource {
    /// One backward pass, balancing at the shared representation.
    #[default]
    Representation,
    /// One backward pass per task, balancing full shared-parameter gradients.
    Parameter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub gradient_source: GradientSource,
    pub optimizer: OptimizerKind,
    /// α (default 0.01).
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// A loss above this (or non-finite) aborts the run (default 1e10).
    pub divergence_threshold: f64,
    /// Adds wall-clock seconds to every record; makes record files
    /// non-reproducible (default false).
    pub record_timing: bool,
    /// Evaluation batch size for the end-of-run metric report (default 1024).
    pub eval_batch_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            gradient_source: GradientSource::Representation,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            divergence_threshold: 1e10,
            record_timing: false,
            eval_batch_size: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Line-delimited record file; not written when absent.
    pub records: Option<PathBuf>,
    /// Run manifest; defaults to the records path with `.manifest.json`.
    pub manifest: Option<PathBuf>,
    /// Directory for sweep and theory outputs (default `.`).
    pub dir: Option<PathBuf>,
}

impl OutputConfig {
    pub fn manifest_path(&self) -> Option<PathBuf> {
        self.manifest
            .clone()
            .or_else(|| self.records.as_ref().map(|r| r.with_extension("manifest.json")))
    }

    pub fn dir(&self) -> PathBuf {
        self.dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// β values to compare against vanilla (default 1, 2, 5, 10).
    pub betas: Vec<f64>,
    /// Worker threads (default: available parallelism).
    pub threads: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            betas: vec![1.0, 2.0, 5.0, 10.0],
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    pub seed: u64,
    /// Random (A, B) pairs for the sandwich-inequality battery.
    pub lemma_instances: usize,
    pub residual_batch_sizes: Vec<usize>,
    pub residual_seeds: usize,
    /// Reference pool size as a multiple of the batch size.
    pub pool_factor: usize,
    /// Training steps certified against the stationarity bound.
    pub certify_steps: usize,
    /// Deliberate corruption, for checking that the suite can fail.
    pub fault: Fault,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lemma_instances: 100,
            residual_batch_sizes: vec![8, 32, 128, 512],
            residual_seeds: 20,
            pool_factor: 16,
            certify_steps: 500,
            fault: Fault::None,
        }
    }
}

impl ExperimentConfig {
    /// Every optional table at its default.
    pub fn new(task: TaskConfig, model: Option<ModelArch>, steps: usize) -> Self {
        Self {
            seed: 0,
            steps,
            batch_size: default_batch_size(),
            model,
            task,
            balancer: BalancerConfig::default(),
            training: TrainingConfig::default(),
            output: OutputConfig::default(),
            sweep: SweepConfig::default(),
            theory: TheoryConfig::default(),
        }
    }

    /// The small shared-bottom network on noisy regression tasks used when a
    /// command needs a network and the config file does not describe one.
    pub fn desk(tasks: usize, seed: u64) -> Self {
        let input_dim = 8;
        let mut spec = SyntheticTaskSpec::new(tasks, input_dim, 0.2, TaskKind::Regression, seed);
        spec.noise_std = 3.0;
        let arch = ModelArch {
            input_dim,
            bottom: vec![16, 8],
            head_hidden: vec![8],
        };
        let mut cfg = Self::new(TaskConfig::Synthetic(spec), Some(arch), 500);
        cfg.seed = seed;
        cfg
    }

    /// [`ExperimentConfig::desk`] with a wider bottom, so that backward
    /// sweeps through the shared layers dominate the step cost as they do in
    /// production-sized models. Used for throughput comparisons.
    pub fn desk_wide(tasks: usize, seed: u64) -> Self {
        let mut cfg = Self::desk(tasks, seed);
        let input_dim = 32;
        if let TaskConfig::Synthetic(spec) = &mut cfg.task {
            spec.input_dim = input_dim;
        }
        cfg.model = Some(ModelArch {
            input_dim,
            bottom: vec![64, 32],
            head_hidden: vec![8],
        });
        cfg
    }

    /// Isotropic (or given-curvature) quadratic testbed.
    pub fn quadratic(centers: Vec<Vec<f64>>, curvatures: Option<Vec<Vec<Vec<f64>>>>, steps: usize) -> Self {
        Self::new(
            TaskConfig::Quadratic(QuadraticConfig {
                centers,
                curvatures,
                theta0: None,
            }),
            None,
            steps,
        )
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn task_count(&self) -> usize {
        match &self.task {
            TaskConfig::Synthetic(s) => s.tasks,
            TaskConfig::Quadratic(q) => q.centers.len(),
        }
    }

    pub fn balancer_params(&self) -> BalancerParams {
        self.balancer.params(self.training.learning_rate)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.steps == 0 {
            return bad("steps must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        let t = &self.training;
        let rates = [
            ("training.learning_rate", t.learning_rate),
            ("balancer.beta", self.balancer.beta),
            ("balancer.gamma", self.balancer.gamma),
            ("balancer.vaccine_rate", self.balancer.vaccine_rate),
            ("balancer.min_norm_tol", self.balancer.min_norm_tol),
            ("training.divergence_threshold", t.divergence_threshold),
            ("training.adam_eps", t.adam_eps),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be a positive number, got {v}"));
            }
        }
        if let Some(lr) = self.balancer.uncertainty_lr {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("balancer.uncertainty_lr must be positive, got {lr}"));
            }
        }
        if self.balancer.gamma > 1.0 || self.balancer.vaccine_rate > 1.0 {
            return bad("balancer.gamma and balancer.vaccine_rate must be at most 1".into());
        }
        if !(self.balancer.rho.is_finite() && self.balancer.rho >= 0.0) {
            return bad(format!("balancer.rho must be ≥ 0, got {}", self.balancer.rho));
        }
        for (name, b) in [("adam_beta1", t.adam_beta1), ("adam_beta2", t.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("training.{name} must lie in [0, 1), got {b}"));
            }
        }
        if t.eval_batch_size == 0 {
            return bad("training.eval_batch_size must be ≥ 1".into());
        }
        if t.gradient_source == GradientSource::Parameter
            && !matches!(
                self.balancer.name,
                BalancerKind::Mgda | BalancerKind::Moco | BalancerKind::Vanilla
            )
        {
            return bad(format!(
                "gradient_source = \"parameter\" is only supported for mgda, moco and vanilla, not {}",
                self.balancer.name
            ));
        }
        let m = self.task_count();
        if m == 0 {
            return bad("at least one task is required".into());
        }
        if let Some(l0) = &self.balancer.lambda0 {
            if l0.len() != m {
                return bad(format!("balancer.lambda0 has {} entries for {m} tasks", l0.len()));
            }
        }
        crate::balancers::BalancerState::with_params(m, &self.balancer_params())
            .map_err(|e| Error::Config(e.to_string()))?;
        match &self.task {
            TaskConfig::Synthetic(s) => {
                s.validate()
                    .map_err(|e| Error::Config(format!("task.synthetic: {e}")))?;
                let Some(arch) = &self.model else {
                    return bad("the synthetic task needs a [model] table".into());
                };
                if arch.input_dim != s.input_dim {
                    return bad(format!(
                        "model.input_dim ({}) differs from task.synthetic.input_dim ({})",
                        arch.input_dim, s.input_dim
                    ));
                }
                if arch.bottom.is_empty() || arch.bottom.contains(&0) || arch.head_hidden.contains(&0) {
                    return bad("model layer widths must be ≥ 1 and the bottom needs a layer".into());
                }
            }
            TaskConfig::Quadratic(q) => {
                q.spec().map_err(|e| Error::Config(format!("task.quadratic: {e}")))?;
                if q.start().len() != q.centers[0].len() {
                    return bad("task.quadratic.theta0 has the wrong dimension".into());
                }
                if self.model.is_some() {
                    return bad("the quadratic testbed has no model; remove the [model] table".into());
                }
            }
        }
        let th = &self.theory;
        if th.pool_factor == 0 || th.residual_batch_sizes.contains(&0) {
            return bad("theory.pool_factor and theory.residual_batch_sizes must be ≥ 1".into());
        }
        if self.sweep.betas.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return bad("sweep.betas must be positive".into());
        }
        if self.sweep.threads == Some(0) {
            return bad("sweep.threads must be ≥ 1".into());
        }
        Ok(())
    }
}
