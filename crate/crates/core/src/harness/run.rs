//! Training loops: summed-loss baseline, balanced training from either
//! gradient source, throughput measurement and the β sweep.

use std::path::PathBuf;
use std::time::Instant;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, GradientSource, TaskConfig};
use super::optim::Optimizer;
use super::records::{
    create_record_file, AbortRecord, NullSink, RecordHeader, RecordSink, RunManifest, RunRecord, RunStatus,
};
use crate::balancers::{Balancer, BalancerKind};
use crate::error::{Error, Result};
use crate::linalg::{DenseVector, SeededRng};
use crate::metrics::MetricReport;
use crate::model::{Batch, SharedBottomModel};
use crate::tasks::{QuadraticMOOSpec, SyntheticTasks};
use crate::theory::stationarity_gap;

/// Random stream of the task spec used for evaluation batches.
pub const EVAL_STREAM: u64 = 2;

const BALANCER_SEED_SALT: u64 = 0x5EED_BA1A;

#[derive(Debug, Clone)]
pub enum Workload {
    Network {
        model: SharedBottomModel,
        data: SyntheticTasks,
    },
    Quadratic {
        spec: QuadraticMOOSpec,
        theta: DenseVector,
    },
}

impl Workload {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        match &config.task {
            TaskConfig::Synthetic(spec) => {
                let arch = config
                    .model
                    .as_ref()
                    .ok_or_else(|| Error::Config("synthetic tasks need a [model] table".into()))?;
                let mut rng = SeededRng::new(config.seed).fork(0);
                let model = SharedBottomModel::random(arch, &spec.task_kinds(), &mut rng)?;
                Ok(Workload::Network {
                    model,
                    data: SyntheticTasks::new(spec)?,
                })
            }
            TaskConfig::Quadratic(q) => {
                let spec = q.spec()?;
                let theta = DenseVector::try_new(q.start())?;
                if theta.dim() != spec.dim() {
                    return Err(Error::Config(format!(
                        "theta0 has {} entries, the quadratic has dimension {}",
                        theta.dim(),
                        spec.dim()
                    )));
                }
                Ok(Workload::Quadratic { spec, theta })
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Workload::Network { .. } => "synthetic",
            Workload::Quadratic { .. } => "quadratic",
        }
    }

    pub fn task_count(&self) -> usize {
        match self {
            Workload::Network { model, .. } => model.task_count(),
            Workload::Quadratic { spec, .. } => spec.task_count(),
        }
    }

    pub fn model(&self) -> Option<&SharedBottomModel> {
        match self {
            Workload::Network { model, .. } => Some(model),
            Workload::Quadratic { .. } => None,
        }
    }

    pub fn theta(&self) -> Option<&DenseVector> {
        match self {
            Workload::Quadratic { theta, .. } => Some(theta),
            Workload::Network { .. } => None,
        }
    }
}

/// One run's mutable state. [`Trainer::step`] performs one full update and
/// returns its record.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: ExperimentConfig,
    workload: Workload,
    balancer: Balancer,
    optimizer: Optimizer,
    step: usize,
    /// Only read with `record_timing`, so untimed runs never touch the clock.
    started: Option<Instant>,
}

impl Trainer {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let workload = Workload::from_config(config)?;
        let m = workload.task_count();
        let n_params = match &workload {
            Workload::Network { model, .. } => model.param_count(),
            Workload::Quadratic { theta, .. } => theta.dim(),
        };
        let balancer = Balancer::new(
            config.balancer.name,
            m,
            &config.balancer_params(),
            config.seed ^ BALANCER_SEED_SALT,
        )?;
        Ok(Self {
            config: config.clone(),
            optimizer: Optimizer::from_config(&config.training, n_params),
            workload,
            balancer,
            step: 0,
            started: config.training.record_timing.then(Instant::now),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn workload(&self) -> &Workload {
        &self.workload
    }

    pub fn balancer(&self) -> &Balancer {
        &self.balancer
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn header(&self) -> RecordHeader {
        RecordHeader::new(
            self.balancer.kind(),
            self.config.training.gradient_source,
            self.workload.task_count(),
            self.workload.name(),
        )
    }

    /// Backward sweeps per step for the configured gradient source. Network
    /// records count the sweeps actually made; the quadratic testbed reports
    /// this number.
    pub fn backward_passes_per_step(&self) -> usize {
        match self.config.training.gradient_source {
            GradientSource::Representation => 1,
            GradientSource::Parameter => self.workload.task_count(),
        }
    }

    /// Next training batch (network workloads only).
    pub fn next_batch(&mut self) -> Result<Option<Batch>> {
        match &mut self.workload {
            Workload::Network { data, .. } => Ok(Some(data.next_batch(self.config.batch_size)?)),
            Workload::Quadratic { .. } => Ok(None),
        }
    }

    pub fn step(&mut self) -> Result<RunRecord> {
        let batch = self.next_batch()?;
        self.step_on(batch.as_ref())
    }

    /// One update on `batch` (ignored by the quadratic workload).
    pub fn step_on(&mut self, batch: Option<&Batch>) -> Result<RunRecord> {
        let step = self.step;
        let record = self.step_inner(batch).map_err(|e| match e {
            e @ Error::Divergence { .. } => e,
            e => Error::AtStep {
                step,
                source: Box::new(e),
            },
        })?;
        self.step += 1;
        Ok(record)
    }

    fn check_losses(&self, losses: &[f64]) -> Result<()> {
        let limit = self.config.training.divergence_threshold;
        if let Some((m, l)) = losses.iter().enumerate().find(|(_, l)| !l.is_finite() || **l > limit) {
            return Err(Error::Divergence {
                step: self.step,
                reason: format!("loss of task {m} is {l:e} (threshold {limit:e})"),
            });
        }
        Ok(())
    }

    fn step_inner(&mut self, batch: Option<&Batch>) -> Result<RunRecord> {
        let source = self.config.training.gradient_source;
        let (losses, grads, gap, update, passes) = match &self.workload {
            Workload::Network { model, .. } => {
                let batch = batch.ok_or_else(|| Error::InvalidArgument("network step needs a batch".into()))?;
                let trace = model.forward(batch)?;
                let losses = trace.losses().to_vec();
                self.check_losses(&losses)?;
                let sweeps = model.bottom_sweeps();
                let (g, outcome, flat) = match source {
                    GradientSource::Representation => {
                        let taps = model.backward_representation_tap(&trace, batch)?;
                        let g = taps.matrix();
                        let outcome = self.balancer.balance(&g, &losses)?;
                        let full = model.backward_apply_aggregate(&trace, &taps, outcome.aggregate.as_slice())?;
                        (g, outcome, full.flatten())
                    }
                    GradientSource::Parameter => {
                        let per_task = model.backward_per_task(&trace, batch)?;
                        let g = per_task.bottom_matrix();
                        let outcome = self.balancer.balance(&g, &losses)?;
                        let mut flat = outcome.aggregate.as_slice().to_vec();
                        for (m, grads) in per_task.grads.iter().enumerate() {
                            flat.extend(grads.heads[m].flatten());
                        }
                        (g, outcome, flat)
                    }
                };
                let passes = model.bottom_sweeps() - sweeps;
                (losses, (g, outcome), None, flat, passes)
            }
            Workload::Quadratic { spec, theta } => {
                let losses = spec.losses(theta)?;
                self.check_losses(&losses)?;
                let g = spec.quadratic_grads(theta)?;
                let gap = stationarity_gap(&g)?;
                let outcome = self.balancer.balance(&g, &losses)?;
                let flat = outcome.aggregate.as_slice().to_vec();
                (losses, (g, outcome), Some(gap), flat, self.backward_passes_per_step())
            }
        };
        let (g, outcome) = grads;
        if !update.iter().all(|x| x.is_finite()) {
            return Err(Error::Divergence {
                step: self.step,
                reason: "non-finite update direction".into(),
            });
        }
        let delta = self.optimizer.delta(&update);
        match &mut self.workload {
            Workload::Network { model, .. } => model.apply_delta(&delta)?,
            Workload::Quadratic { theta, .. } => {
                for (t, d) in theta.as_mut_slice().iter_mut().zip(&delta) {
                    *t += d;
                }
            }
        }
        Ok(RunRecord {
            step: self.step,
            loss: losses,
            lambda: outcome.weights.as_slice().to_vec(),
            raw_grad_norms: g.column_norms(),
            balanced_grad_norms: outcome.processed.column_norms(),
            stationarity_gap: gap,
            wall_seconds: self.started.map(|t| t.elapsed().as_secs_f64()),
            backward_passes: passes,
        })
    }

    /// Runs the remaining configured steps, streaming into `sink`. On
    /// divergence an abort line is written before the error is returned.
    pub fn run(&mut self, sink: &mut dyn RecordSink) -> Result<()> {
        if self.started.is_some() {
            self.started = Some(Instant::now());
        }
        while self.step < self.config.steps {
            match self.step() {
                Ok(r) => sink.record(&r)?,
                Err(e) => {
                    if let Error::Divergence { step, reason } = e.root() {
                        sink.abort(&AbortRecord {
                            step: *step,
                            reason: reason.clone(),
                        })?;
                    }
                    return Err(e);
                }
            }
        }
        Ok(())
    }

    /// Losses at the current parameters on a fresh evaluation batch (network)
    /// or exactly (quadratic), without advancing any stream used for training.
    pub fn current_losses(&self) -> Result<Vec<f64>> {
        match &self.workload {
            Workload::Network { model, .. } => {
                let batch = self.eval_batch()?.expect("network workload");
                Ok(model.forward(&batch)?.losses().to_vec())
            }
            Workload::Quadratic { spec, theta } => spec.losses(theta),
        }
    }

    fn eval_batch(&self) -> Result<Option<Batch>> {
        match &self.config.task {
            TaskConfig::Synthetic(spec) => Ok(Some(
                SyntheticTasks::with_stream(spec, EVAL_STREAM)?.next_batch(self.config.training.eval_batch_size)?,
            )),
            TaskConfig::Quadratic(_) => Ok(None),
        }
    }

    /// Normalized entropy and loss per task on the evaluation batch.
    pub fn evaluate(&self) -> Result<Option<MetricReport>> {
        match (&self.workload, self.eval_batch()?) {
            (Workload::Network { model, .. }, Some(batch)) => Ok(Some(MetricReport::evaluate(model, &batch)?)),
            _ => Ok(None),
        }
    }

    pub fn into_workload(self) -> Workload {
        self.workload
    }
}

/// Configuration of the summed-loss baseline derived from `config`.
pub fn vanilla_config(config: &ExperimentConfig) -> ExperimentConfig {
    let mut c = config.clone();
    c.balancer.name = BalancerKind::Vanilla;
    c.training.gradient_source = GradientSource::Representation;
    c
}

/// Summed-loss training with one backward pass per step.
pub fn run_vanilla(config: &ExperimentConfig, sink: &mut dyn RecordSink) -> Result<Trainer> {
    run_balanced(&vanilla_config(config), sink)
}

/// Training with the configured balancer and gradient source.
pub fn run_balanced(config: &ExperimentConfig, sink: &mut dyn RecordSink) -> Result<Trainer> {
    let mut trainer = Trainer::new(config)?;
    trainer.run(sink)?;
    Ok(trainer)
}

/// Runs `config` with its record file and manifest (when configured).
/// Divergence is reported through the manifest status, not as an error.
pub fn execute(config: &ExperimentConfig) -> Result<RunManifest> {
    let mut trainer = Trainer::new(config)?;
    let header = trainer.header();
    let records_path = config.output.records.clone();
    let mut last = None;
    let (outcome, lines) = match &records_path {
        Some(path) => {
            let mut w = create_record_file(path, &header)?;
            let outcome = trainer.run(&mut Tee {
                inner: &mut w,
                last: &mut last,
            });
            let lines = w.lines();
            w.finish()?;
            (outcome, lines)
        }
        None => {
            let outcome = trainer.run(&mut Tee {
                inner: &mut NullSink,
                last: &mut last,
            });
            (outcome, 0)
        }
    };
    let (status, abort_reason) = match outcome {
        Ok(()) => (RunStatus::Completed, None),
        Err(e) => match e.root() {
            Error::Divergence { .. } => (RunStatus::Diverged, Some(e.to_string())),
            _ => return Err(e),
        },
    };
    let metrics = if status == RunStatus::Completed {
        trainer.evaluate()?
    } else {
        None
    };
    let manifest = RunManifest {
        schema: super::records::MANIFEST_SCHEMA.into(),
        version: super::records::RECORD_SCHEMA_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        method: config.balancer.name,
        status,
        steps_requested: config.steps,
        steps_completed: trainer.steps_done(),
        records_path,
        record_lines: lines,
        final_loss: last.map(|r| r.loss).unwrap_or_default(),
        metrics,
        abort_reason,
        config: config.clone(),
    };
    if let Some(path) = config.output.manifest_path() {
        manifest.write(path)?;
    }
    info!(
        "{}: {:?} after {} steps",
        config.balancer.name, manifest.status, manifest.steps_completed
    );
    Ok(manifest)
}

/// Forwards to another sink and remembers the last step record.
struct Tee<'a> {
    inner: &'a mut dyn RecordSink,
    last: &'a mut Option<RunRecord>,
}

impl RecordSink for Tee<'_> {
    fn record(&mut self, r: &RunRecord) -> Result<()> {
        *self.last = Some(r.clone());
        self.inner.record(r)
    }

    fn abort(&mut self, a: &AbortRecord) -> Result<()> {
        self.inner.abort(a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub steps_per_sec: f64,
    pub samples_per_sec: f64,
    /// Backward sweeps per step.
    pub backward_count: usize,
}

/// Distinct batches cycled through during a throughput measurement.
const THROUGHPUT_BATCHES: usize = 8;

/// Times `timed_steps` updates after `warmup_steps` untimed ones. Batches
/// are drawn up front from the task stream so every configuration sharing a
/// task spec and seed sees the same model and data.
pub fn measure_throughput(config: &ExperimentConfig, warmup_steps: usize, timed_steps: usize) -> Result<Throughput> {
    if timed_steps < 100 {
        return Err(Error::InvalidArgument(format!(
            "timed_steps must be ≥ 100, got {timed_steps}"
        )));
    }
    let mut trainer = Trainer::new(config)?;
    let mut batches = Vec::with_capacity(THROUGHPUT_BATCHES);
    for _ in 0..THROUGHPUT_BATCHES {
        batches.push(trainer.next_batch()?);
    }
    for i in 0..warmup_steps {
        trainer.step_on(batches[i % THROUGHPUT_BATCHES].as_ref())?;
    }
    let start = Instant::now();
    for i in 0..timed_steps {
        trainer.step_on(batches[i % THROUGHPUT_BATCHES].as_ref())?;
    }
    let secs = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    let samples = match trainer.workload() {
        Workload::Network { .. } => config.batch_size,
        Workload::Quadratic { .. } => 1,
    };
    let steps_per_sec = timed_steps as f64 / secs;
    debug!("{}: {steps_per_sec:.1} steps/s", config.balancer.name);
    Ok(Throughput {
        steps_per_sec,
        samples_per_sec: steps_per_sec * samples as f64,
        backward_count: trainer.backward_passes_per_step(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub label: String,
    pub method: BalancerKind,
    pub beta: Option<f64>,
    pub status: RunStatus,
    pub steps_completed: usize,
    pub final_loss: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
    pub records_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub baseline: SweepEntry,
    pub runs: Vec<SweepEntry>,
}

fn sweep_entry(label: String, beta: Option<f64>, mut config: ExperimentConfig) -> Result<SweepEntry> {
    let dir = config.output.dir();
    let records = dir.join(format!("{label}.jsonl"));
    config.output.records = Some(records.clone());
    config.output.manifest = Some(dir.join(format!("{label}.manifest.json")));
    let manifest = execute(&config)?;
    Ok(SweepEntry {
        label,
        method: config.balancer.name,
        beta,
        status: manifest.status,
        steps_completed: manifest.steps_completed,
        final_loss: manifest.final_loss,
        metrics: manifest.metrics,
        records_path: records,
    })
}

/// Runs the summed-loss baseline and the configured balancer at every β in
/// the sweep grid, one run per thread, and reports NE differences against
/// the baseline. Each run writes its own record file and manifest under the
/// output directory; the report goes to `sweep.json` there.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepReport> {
    config.validate()?;
    let mut jobs: Vec<(String, Option<f64>, ExperimentConfig)> = vec![("vanilla".into(), None, vanilla_config(config))];
    for &beta in &config.sweep.betas {
        let mut c = config.clone();
        c.balancer.beta = beta;
        jobs.push((format!("{}-beta-{beta}", config.balancer.name), Some(beta), c));
    }
    let threads = config
        .sweep
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let mut results: Vec<Option<Result<SweepEntry>>> = (0..jobs.len()).map(|_| None).collect();
    for (chunk_jobs, chunk_out) in jobs.chunks(threads).zip(results.chunks_mut(threads)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk_jobs
                .iter()
                .map(|(label, beta, c)| s.spawn(move || sweep_entry(label.clone(), *beta, c.clone())))
                .collect();
            for (h, out) in handles.into_iter().zip(chunk_out.iter_mut()) {
                *out = Some(
                    h.join()
                        .unwrap_or_else(|_| Err(Error::InvalidArgument("sweep worker panicked".into()))),
                );
            }
        });
    }
    let mut entries = results.into_iter().map(|r| r.expect("every job ran"));
    let baseline = entries.next().expect("baseline job")?;
    let mut runs = Vec::new();
    for e in entries {
        let mut e = e?;
        if let (Some(base), Some(m)) = (&baseline.metrics, e.metrics.take()) {
            e.metrics = Some(m.with_baseline(base)?);
        }
        runs.push(e);
    }
    let report = SweepReport { baseline, runs };
    let dir = config.output.dir();
    std::fs::create_dir_all(&dir)?;
    let f = std::io::BufWriter::new(std::fs::File::create(dir.join("sweep.json"))?);
    serde_json::to_writer_pretty(f, &report)?;
    Ok(report)
}
