//! Experiment driver: configuration, training loops, record files,
//! throughput measurement and the theory-check suite.

pub mod config;
pub mod optim;
pub mod records;
pub mod run;
pub mod theory_suite;

pub use config::{ExperimentConfig, GradientSource, OptimizerKind, TaskConfig};
pub use records::{emit_records, parse_records, read_records, RecordHeader, RunManifest, RunRecord, RunStatus};
pub use run::{execute, measure_throughput, run_balanced, run_sweep, run_vanilla, Throughput, Trainer, Workload};
pub use theory_suite::{run_theory_suite, TheoryReport};
