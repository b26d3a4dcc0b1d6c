//! Multi-task gradient balancing on a shared-bottom network.
//!
//! The centrepiece is [`balancers::multibalance_step`]: per-task gradients
//! are tapped at the shared representation in a single backward pass,
//! their magnitudes are stabilised with a moving average of norms, the task
//! weights take one projected descent step on the simplex, and the weighted
//! combination is pushed back through the shared layers. The classical
//! baselines (MGDA, MoCo-style tracking, PCGrad, Gradient Vaccine, Gradient
//! Drop, DB-MTL, IMTL-G, Uncertainty weighting) share the same interface.
//!
//! Supporting modules: dense linear algebra ([`linalg`]), simplex solvers
//! ([`simplex`]), the explicit-backprop model ([`model`]), synthetic and
//! quadratic workloads plus metrics ([`tasks`], [`metrics`]), numerical
//! checks of the representation-gradient surrogate ([`theory`]), and the
//! experiment driver ([`harness`]).

pub mod balancers;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod simplex;
pub mod tasks;
pub mod theory;

pub use error::{Error, Result};
pub use linalg::{DenseMatrix, DenseVector, SeededRng};
pub use simplex::{MinNormResult, SimplexWeights, StepMode};
