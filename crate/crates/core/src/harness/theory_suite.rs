//! The theory-check suite. Each check runs over many deterministic random
//! instances; every failing instance is written out as a replay file that
//! [`replay`] turns back into the same single-instance report.
//!
//! The report file holds one JSON line per check followed by a summary line.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, GradientSource, TaskConfig};
use super::run::Trainer;
use crate::balancers::BalancerKind;
use crate::error::{Error, Result};
use crate::linalg::{norm, DenseMatrix, DenseVector, SeededRng};
use crate::model::{Batch, ModelArch, SharedBottomModel};
use crate::simplex::{min_norm_weights, SimplexWeights};
use crate::tasks::{SyntheticTaskSpec, SyntheticTasks};
use crate::theory::{
    check_lemma1, check_theorem1, decrease_rate, estimate_residual_with, stationarity_gap, Fault, Lemma1Report,
    ResidualReport, CHECK_SLACK, ORACLE_TOL,
};

pub const REPORT_SCHEMA: &str = "multibalance-theory";

/// Largest tolerated `‖∇_W F λ − (J̄ᵀ∇_Φ F λ + R_B)‖`.
pub const DECOMPOSITION_TOL: f64 = 1e-10;

/// Largest tolerated stationarity gap at a summed-loss optimum.
pub const PARETO_GAP_TOL: f64 = 1e-8;

/// Gap the balanced quadratic run has to reach.
pub const BALANCED_GAP_TOL: f64 = 1e-4;

/// Task-data stream for reference pools.
const POOL_STREAM: u64 = 3;
/// First task-data stream for residual batches; seed `s` uses this plus `s`.
const BATCH_STREAM_BASE: u64 = 16;

const DECREASE_INSTANCES: usize = 100;
const VANILLA_STEPS: usize = 5_000;
const BALANCED_STEPS: usize = 10_000;
const QUADRATIC_LR: f64 = 0.01;
/// Weight step size for the balanced quadratic run. The weight subproblem
/// has curvature ‖g₁ − g₂‖², which is 4 on the testbed below.
const QUADRATIC_BETA: f64 = 0.2;

/// One residual estimate, fully determined by its fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualCase {
    pub arch: ModelArch,
    pub task: SyntheticTaskSpec,
    pub model_seed: u64,
    pub batch_size: usize,
    pub batch_seed: u64,
    /// Reference pool size; `None` uses the batch itself as the pool.
    pub pool_size: Option<usize>,
    pub lambda: Vec<f64>,
    pub fault: Fault,
}

/// The residual sweep over batch sizes, fully determined by its fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualSweep {
    pub arch: ModelArch,
    pub task: SyntheticTaskSpec,
    pub model_seed: u64,
    pub batch_sizes: Vec<usize>,
    pub seeds: usize,
    pub pool_factor: usize,
    pub fault: Fault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapRule {
    /// The gap at the final iterate is at most the threshold, and the
    /// iterate lies on the segment between the two centers.
    FinalOnSegment,
    /// Some step's gap falls below the threshold.
    Reaches,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationarityCase {
    pub config: ExperimentConfig,
    pub rule: GapRule,
    pub threshold: f64,
}

/// A single instance of one check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum ReplayCase {
    Lemma1 {
        a: DenseMatrix,
        b: DenseMatrix,
        /// Also require every inequality to be tight.
        scaled_identity: bool,
    },
    Residual(ResidualCase),
    ResidualTrend(ResidualSweep),
    Certification {
        config: ExperimentConfig,
        step: usize,
        pool_factor: usize,
        fault: Fault,
    },
    Stationarity(StationarityCase),
    DecreaseRate {
        g: DenseMatrix,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub batch_size: usize,
    pub pool_size: usize,
    pub median_residual: f64,
    /// Median `‖R_B‖` when the pool is the batch itself. Reported, not
    /// checked: with the batch as its own pool the residual is the
    /// within-batch covariance of Jacobians and representation gradients.
    pub median_residual_pool_is_batch: f64,
    pub max_decomposition_error: f64,
    pub bound_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InstanceResult {
    Lemma1 {
        report: Lemma1Report,
        scaled_identity: bool,
    },
    Residual {
        report: ResidualReport,
    },
    ResidualTrend {
        rows: Vec<ResidualRow>,
        non_increasing: bool,
    },
    Certification {
        step: usize,
        report: ResidualReport,
    },
    Stationarity {
        rule: GapRule,
        final_gap: f64,
        distance_to_segment: Option<f64>,
        first_step_below: Option<usize>,
    },
    DecreaseRate {
        min_rate: f64,
        min_norm_sq: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub pass: bool,
    pub result: InstanceResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub check: String,
    pub pass: bool,
    pub instances: usize,
    pub failures: usize,
    /// Worst value of the check's key quantity (see `summary_quantity`).
    pub worst: f64,
    pub summary_quantity: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub residual_rows: Vec<ResidualRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub replay_files: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReportLine {
    Check(CheckOutcome),
    Summary {
        schema: String,
        pass: bool,
        failed: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub pass: bool,
    pub checks: Vec<CheckOutcome>,
}

impl TheoryReport {
    pub fn failed_checks(&self) -> Vec<String> {
        self.checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.check.clone())
            .collect()
    }

    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        for c in &self.checks {
            serde_json::to_writer(&mut *out, &ReportLine::Check(c.clone()))?;
            out.write_all(b"\n")?;
        }
        let summary = ReportLine::Summary {
            schema: REPORT_SCHEMA.into(),
            pass: self.pass,
            failed: self.failed_checks(),
        };
        serde_json::to_writer(&mut *out, &summary)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

pub fn read_replay(path: impl AsRef<Path>) -> Result<ReplayCase> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_replay(case: &ReplayCase, path: impl AsRef<Path>) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, case)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Re-evaluates one instance.
pub fn replay(case: &ReplayCase) -> Result<InstanceReport> {
    match case {
        ReplayCase::Lemma1 { a, b, scaled_identity } => lemma_instance(a, b, *scaled_identity),
        ReplayCase::Residual(c) => residual_instance(c),
        ReplayCase::ResidualTrend(s) => residual_trend(s),
        ReplayCase::Certification {
            config,
            step,
            pool_factor,
            fault,
        } => certification_run(config, *pool_factor, *fault, Some(*step))?
            .into_iter()
            .last()
            .ok_or_else(|| Error::InvalidArgument(format!("step {step} is beyond the configured run"))),
        ReplayCase::Stationarity(c) => stationarity_instance(c),
        ReplayCase::DecreaseRate { g } => decrease_instance(g),
    }
}

fn lemma_instance(a: &DenseMatrix, b: &DenseMatrix, scaled_identity: bool) -> Result<InstanceReport> {
    let report = check_lemma1(a, b)?;
    let pass = report.pass && (!scaled_identity || report.max_gap() <= CHECK_SLACK);
    Ok(InstanceReport {
        pass,
        result: InstanceResult::Lemma1 {
            report,
            scaled_identity,
        },
    })
}

fn gaussian(rng: &mut SeededRng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_row_major(rows, cols, rng.normal_vec(rows * cols)).expect("finite draws")
}

fn lemma_cases(seed: u64, count: usize) -> Vec<ReplayCase> {
    let mut rng = SeededRng::new(seed).fork(11);
    let mut cases = Vec::with_capacity(2 * count);
    for _ in 0..count {
        let m = 2 + rng.below(3);
        let n = 2 + rng.below(5);
        let k = n + rng.below(3);
        cases.push(ReplayCase::Lemma1 {
            a: gaussian(&mut rng, n, m),
            b: gaussian(&mut rng, k, n),
            scaled_identity: false,
        });
    }
    for _ in 0..count {
        let m = 2 + rng.below(3);
        let n = 2 + rng.below(5);
        let c = rng.uniform_range(0.2, 3.0);
        cases.push(ReplayCase::Lemma1 {
            a: gaussian(&mut rng, n, m),
            b: DenseMatrix::identity(n).scale(c),
            scaled_identity: true,
        });
    }
    cases
}

struct ResidualInputs {
    model: SharedBottomModel,
    batch: Batch,
    pool: Option<Batch>,
}

fn residual_inputs(c: &ResidualCase) -> Result<ResidualInputs> {
    let model = SharedBottomModel::random(&c.arch, &c.task.task_kinds(), &mut SeededRng::new(c.model_seed))?;
    let batch = SyntheticTasks::with_stream(&c.task, BATCH_STREAM_BASE + c.batch_seed)?.next_batch(c.batch_size)?;
    let pool = match c.pool_size {
        Some(n) => Some(SyntheticTasks::with_stream(&c.task, POOL_STREAM)?.next_batch(n)?),
        None => None,
    };
    Ok(ResidualInputs { model, batch, pool })
}

fn residual_verdict(report: &ResidualReport) -> bool {
    check_theorem1(report) && report.decomposition_error <= DECOMPOSITION_TOL
}

fn residual_instance(c: &ResidualCase) -> Result<InstanceReport> {
    let inputs = residual_inputs(c)?;
    let lambda = SimplexWeights::new(c.lambda.clone())?;
    let pool = inputs.pool.as_ref().unwrap_or(&inputs.batch);
    let report = estimate_residual_with(&inputs.model, pool, &inputs.batch, &lambda, c.fault)?;
    Ok(InstanceReport {
        pass: residual_verdict(&report),
        result: InstanceResult::Residual { report },
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => xs[n / 2],
        _ => 0.5 * (xs[n / 2 - 1] + xs[n / 2]),
    }
}

fn sweep_case(s: &ResidualSweep, batch_size: usize, seed: usize, pool_size: Option<usize>) -> ResidualCase {
    let m = s.task.tasks;
    ResidualCase {
        arch: s.arch.clone(),
        task: s.task.clone(),
        model_seed: s.model_seed,
        batch_size,
        batch_seed: seed as u64,
        pool_size,
        lambda: vec![1.0 / m as f64; m],
        fault: s.fault,
    }
}

/// Every instance of the sweep: per batch size, one report per seed against
/// the reference pool and one with the batch as its own pool.
fn residual_sweep_reports(s: &ResidualSweep) -> Result<Vec<(ResidualCase, InstanceReport, InstanceReport)>> {
    let mut out = Vec::new();
    for &b in &s.batch_sizes {
        for seed in 0..s.seeds {
            let case = sweep_case(s, b, seed, Some(s.pool_factor * b));
            let with_pool = residual_instance(&case)?;
            let own = residual_instance(&sweep_case(s, b, seed, None))?;
            out.push((case, with_pool, own));
        }
    }
    Ok(out)
}

fn residual_of(r: &InstanceReport) -> &ResidualReport {
    match &r.result {
        InstanceResult::Residual { report } | InstanceResult::Certification { report, .. } => report,
        _ => unreachable!("residual instance"),
    }
}

fn residual_rows(s: &ResidualSweep, reports: &[(ResidualCase, InstanceReport, InstanceReport)]) -> Vec<ResidualRow> {
    s.batch_sizes
        .iter()
        .map(|&b| {
            let at_b: Vec<_> = reports.iter().filter(|(c, _, _)| c.batch_size == b).collect();
            ResidualRow {
                batch_size: b,
                pool_size: s.pool_factor * b,
                median_residual: median(at_b.iter().map(|(_, r, _)| residual_of(r).residual_norm).collect()),
                median_residual_pool_is_batch: median(
                    at_b.iter().map(|(_, _, r)| residual_of(r).residual_norm).collect(),
                ),
                max_decomposition_error: at_b
                    .iter()
                    .map(|(_, r, _)| residual_of(r).decomposition_error)
                    .fold(0.0, f64::max),
                bound_violations: at_b.iter().filter(|(_, r, _)| !r.pass).count(),
            }
        })
        .collect()
}

fn non_increasing(rows: &[ResidualRow]) -> bool {
    rows.windows(2).all(|w| w[1].median_residual <= w[0].median_residual)
}

fn residual_trend(s: &ResidualSweep) -> Result<InstanceReport> {
    let reports = residual_sweep_reports(s)?;
    let rows = residual_rows(s, &reports);
    let ok = non_increasing(&rows);
    Ok(InstanceReport {
        pass: ok && reports.iter().all(|(_, r, _)| r.pass),
        result: InstanceResult::ResidualTrend {
            rows,
            non_increasing: ok,
        },
    })
}

/// Trains `config` for its configured number of steps (or through `only`),
/// checking the stationarity bound at every step before the update.
fn certification_run(
    config: &ExperimentConfig,
    pool_factor: usize,
    fault: Fault,
    only: Option<usize>,
) -> Result<Vec<InstanceReport>> {
    let TaskConfig::Synthetic(task) = &config.task else {
        return Err(Error::Config("certification needs the synthetic workload".into()));
    };
    let pool = SyntheticTasks::with_stream(task, POOL_STREAM)?.next_batch(pool_factor * config.batch_size)?;
    let mut trainer = Trainer::new(config)?;
    let last = only.map_or(config.steps, |s| s + 1).min(config.steps);
    let mut out = Vec::new();
    for step in 0..last {
        let batch = trainer.next_batch()?.expect("synthetic workload");
        if only.is_none_or(|s| s == step) {
            let model = trainer.workload().model().expect("synthetic workload");
            let lambda = trainer.balancer().state().lambda.clone();
            let report = estimate_residual_with(model, &pool, &batch, &lambda, fault)?;
            out.push(InstanceReport {
                pass: residual_verdict(&report),
                result: InstanceResult::Certification { step, report },
            });
        }
        trainer.step_on(Some(&batch))?;
    }
    Ok(out)
}

fn distance_to_segment(x: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let ab: Vec<f64> = b.iter().zip(a).map(|(b, a)| b - a).collect();
    let ax: Vec<f64> = x.iter().zip(a).map(|(x, a)| x - a).collect();
    let len2 = crate::linalg::dot(&ab, &ab);
    let t = if len2 > 0.0 {
        (crate::linalg::dot(&ax, &ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let diff: Vec<f64> = ax.iter().zip(&ab).map(|(p, d)| p - t * d).collect();
    norm(&diff)
}

fn stationarity_instance(c: &StationarityCase) -> Result<InstanceReport> {
    let TaskConfig::Quadratic(q) = &c.config.task else {
        return Err(Error::Config("stationarity cases use the quadratic testbed".into()));
    };
    let mut trainer = Trainer::new(&c.config)?;
    let mut first_below = None;
    for _ in 0..c.config.steps {
        let r = trainer.step()?;
        let gap = r.stationarity_gap.expect("quadratic records carry the gap");
        if first_below.is_none() && gap < c.threshold {
            first_below = Some(r.step);
            if c.rule == GapRule::Reaches {
                break;
            }
        }
    }
    let spec = q.spec()?;
    let theta: DenseVector = trainer.workload().theta().expect("quadratic workload").clone();
    let final_gap = stationarity_gap(&spec.quadratic_grads(&theta)?)?;
    let (pass, dist) = match c.rule {
        GapRule::Reaches => (first_below.is_some(), None),
        GapRule::FinalOnSegment => {
            let d = (q.centers.len() == 2 && q.curvatures.as_ref().is_none_or(|c| c.iter().all(|h| is_isotropic(h))))
                .then(|| distance_to_segment(theta.as_slice(), &q.centers[0], &q.centers[1]));
            (final_gap <= c.threshold && d.is_none_or(|d| d <= c.threshold), d)
        }
    };
    Ok(InstanceReport {
        pass,
        result: InstanceResult::Stationarity {
            rule: c.rule,
            final_gap,
            distance_to_segment: dist,
            first_step_below: first_below,
        },
    })
}

/// A multiple of the identity, so that the Pareto set of two such tasks is
/// the segment between their centers.
fn is_isotropic(h: &[Vec<f64>]) -> bool {
    h.iter().enumerate().all(|(i, row)| {
        row.iter()
            .enumerate()
            .all(|(j, x)| if i == j { *x == h[0][0] } else { *x == 0.0 })
    })
}

/// Two-task isotropic quadratic with centers `±e₁` (shifted by `offset`)
/// and curvatures `h`.
fn quadratic_case(offset: &[f64], h: [f64; 2], steps: usize) -> ExperimentConfig {
    let d = offset.len();
    let mut c1 = offset.to_vec();
    let mut c2 = offset.to_vec();
    c1[0] += 1.0;
    c2[0] -= 1.0;
    let curv = |s: f64| -> Vec<Vec<f64>> {
        (0..d)
            .map(|i| (0..d).map(|j| if i == j { s } else { 0.0 }).collect())
            .collect()
    };
    let curvatures = (h != [1.0, 1.0]).then(|| vec![curv(h[0]), curv(h[1])]);
    let mut cfg = ExperimentConfig::quadratic(vec![c1, c2], curvatures, steps);
    if let TaskConfig::Quadratic(q) = &mut cfg.task {
        let mut start = offset.to_vec();
        start[d - 1] += 2.0;
        q.theta0 = Some(start);
    }
    cfg.training.learning_rate = QUADRATIC_LR;
    cfg
}

/// The balanced-run testbed: exact gradients, no norm smoothing (`γ = 1`),
/// no anchor (`ρ = 0`) and inner-product weight steps.
pub fn balanced_quadratic_config(offset: &[f64]) -> ExperimentConfig {
    let mut cfg = quadratic_case(offset, [1.0, 1.0], BALANCED_STEPS);
    cfg.balancer.name = BalancerKind::Multibalance;
    cfg.balancer.gamma = 1.0;
    cfg.balancer.rho = 0.0;
    cfg.balancer.cosine_mode = false;
    cfg.balancer.beta = QUADRATIC_BETA;
    cfg.training.gradient_source = GradientSource::Representation;
    cfg
}

fn stationarity_cases(seed: u64) -> Vec<StationarityCase> {
    let mut rng = SeededRng::new(seed).fork(12);
    let offset: Vec<f64> = rng.normal_vec(3);
    let mut cases = Vec::new();
    for h2 in [0.25, 0.5, 1.0, 2.0, 4.0] {
        let mut cfg = quadratic_case(&offset, [1.0, h2], VANILLA_STEPS);
        cfg.balancer.name = BalancerKind::Vanilla;
        cases.push(StationarityCase {
            config: cfg,
            rule: GapRule::FinalOnSegment,
            threshold: PARETO_GAP_TOL,
        });
    }
    cases.push(StationarityCase {
        config: balanced_quadratic_config(&offset),
        rule: GapRule::Reaches,
        threshold: BALANCED_GAP_TOL,
    });
    cases
}

fn decrease_instance(g: &DenseMatrix) -> Result<InstanceReport> {
    let res = min_norm_weights(g, ORACLE_TOL, 100_000)?;
    let min_rate = decrease_rate(g, &res.direction)?;
    let min_norm_sq = res.norm * res.norm;
    Ok(InstanceReport {
        pass: min_rate >= min_norm_sq - CHECK_SLACK,
        result: InstanceResult::DecreaseRate { min_rate, min_norm_sq },
    })
}

fn decrease_cases(seed: u64) -> Vec<ReplayCase> {
    let mut rng = SeededRng::new(seed).fork(13);
    (0..DECREASE_INSTANCES)
        .map(|_| {
            let m = 2 + rng.below(3);
            let n = 2 + rng.below(6);
            ReplayCase::DecreaseRate {
                g: gaussian(&mut rng, n, m),
            }
        })
        .collect()
}

/// The network and tasks the residual checks run on: the config's own when
/// it describes a synthetic workload, otherwise the desk default.
pub fn theory_network(config: &ExperimentConfig) -> ExperimentConfig {
    match (&config.task, &config.model) {
        (TaskConfig::Synthetic(_), Some(_)) => config.clone(),
        _ => {
            let mut desk = ExperimentConfig::desk(3, config.theory.seed);
            desk.theory = config.theory.clone();
            desk.output = config.output.clone();
            desk
        }
    }
}

/// Certification run configuration derived from `config`.
pub fn certification_config(config: &ExperimentConfig) -> ExperimentConfig {
    let mut c = theory_network(config);
    c.steps = config.theory.certify_steps;
    if !c.balancer.name.simplex_weights() {
        c.balancer.name = BalancerKind::Multibalance;
    }
    c.training.record_timing = false;
    c
}

pub fn residual_sweep_of(config: &ExperimentConfig) -> ResidualSweep {
    let net = theory_network(config);
    let TaskConfig::Synthetic(task) = net.task else {
        unreachable!("theory_network is synthetic")
    };
    ResidualSweep {
        arch: net.model.expect("theory_network has a model"),
        task,
        model_seed: config.theory.seed,
        batch_sizes: config.theory.residual_batch_sizes.clone(),
        seeds: config.theory.residual_seeds,
        pool_factor: config.theory.pool_factor,
        fault: config.theory.fault,
    }
}

struct CheckBuilder {
    name: &'static str,
    quantity: &'static str,
    outcome: CheckOutcome,
    failing: Vec<ReplayCase>,
}

impl CheckBuilder {
    fn new(name: &'static str, quantity: &'static str) -> Self {
        Self {
            name,
            quantity,
            outcome: CheckOutcome {
                check: name.into(),
                pass: true,
                instances: 0,
                failures: 0,
                worst: 0.0,
                summary_quantity: quantity.into(),
                residual_rows: Vec::new(),
                replay_files: Vec::new(),
            },
            failing: Vec::new(),
        }
    }

    fn add(&mut self, case: impl FnOnce() -> ReplayCase, report: &InstanceReport, value: f64) {
        self.outcome.instances += 1;
        self.outcome.worst = self.outcome.worst.max(value);
        if !report.pass {
            self.outcome.pass = false;
            self.outcome.failures += 1;
            self.failing.push(case());
        }
    }

    fn finish(mut self, replay_dir: Option<&Path>) -> Result<CheckOutcome> {
        if let Some(dir) = replay_dir {
            for (i, case) in self.failing.iter().enumerate() {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("replay-{}-{i}.json", self.name));
                write_replay(case, &path)?;
                self.outcome.replay_files.push(path);
            }
        }
        if !self.outcome.pass {
            warn!(
                "theory check {} failed on {} of {} instances ({} up to {:e})",
                self.name, self.outcome.failures, self.outcome.instances, self.quantity, self.outcome.worst
            );
        }
        Ok(self.outcome)
    }
}

/// Runs every check. Replay files for failing instances go to `replay_dir`
/// when given.
pub fn run_theory_suite_in(config: &ExperimentConfig, replay_dir: Option<&Path>) -> Result<TheoryReport> {
    let th = &config.theory;
    let mut checks = Vec::new();

    let mut lemma = CheckBuilder::new("lemma1", "largest inequality violation");
    for case in lemma_cases(th.seed, th.lemma_instances) {
        let ReplayCase::Lemma1 { a, b, scaled_identity } = &case else {
            unreachable!()
        };
        let r = lemma_instance(a, b, *scaled_identity)?;
        let InstanceResult::Lemma1 { report, .. } = &r.result else {
            unreachable!()
        };
        let violation = report.terms.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
        let value = if *scaled_identity {
            violation.max(report.max_gap())
        } else {
            violation
        };
        lemma.add(|| case.clone(), &r, value);
    }
    checks.push(lemma.finish(replay_dir)?);

    let sweep = residual_sweep_of(config);
    let reports = residual_sweep_reports(&sweep)?;
    let mut residual = CheckBuilder::new("residual_decomposition", "largest decomposition error");
    for (case, r, _) in &reports {
        residual.add(
            || ReplayCase::Residual(case.clone()),
            r,
            residual_of(r).decomposition_error,
        );
    }
    checks.push(residual.finish(replay_dir)?);

    let rows = residual_rows(&sweep, &reports);
    let mut trend = CheckBuilder::new("residual_trend", "largest increase of the median residual");
    let trend_ok = non_increasing(&rows);
    let increase = rows
        .windows(2)
        .map(|w| w[1].median_residual - w[0].median_residual)
        .fold(0.0, f64::max);
    trend.add(
        || ReplayCase::ResidualTrend(sweep.clone()),
        &InstanceReport {
            pass: trend_ok,
            result: InstanceResult::ResidualTrend {
                rows: rows.clone(),
                non_increasing: trend_ok,
            },
        },
        increase,
    );
    let mut trend = trend.finish(replay_dir)?;
    trend.residual_rows = rows;
    checks.push(trend);

    let cert_cfg = certification_config(config);
    let mut cert = CheckBuilder::new("theorem1_certification", "largest bound violation");
    for r in certification_run(&cert_cfg, th.pool_factor, th.fault, None)? {
        let InstanceResult::Certification { step, report } = &r.result else {
            unreachable!()
        };
        let step = *step;
        let value = (report.param_grad_norm - report.bound).max(report.decomposition_error);
        cert.add(
            || ReplayCase::Certification {
                config: cert_cfg.clone(),
                step,
                pool_factor: th.pool_factor,
                fault: th.fault,
            },
            &r,
            value.max(0.0),
        );
    }
    checks.push(cert.finish(replay_dir)?);

    let mut stat = CheckBuilder::new("stationarity", "largest final gap");
    for case in stationarity_cases(th.seed) {
        let r = stationarity_instance(&case)?;
        let InstanceResult::Stationarity { final_gap, .. } = r.result else {
            unreachable!()
        };
        stat.add(|| ReplayCase::Stationarity(case.clone()), &r, final_gap);
    }
    checks.push(stat.finish(replay_dir)?);

    let mut dec = CheckBuilder::new("decrease_rate", "largest shortfall below the squared min norm");
    for case in decrease_cases(th.seed) {
        let ReplayCase::DecreaseRate { g } = &case else {
            unreachable!()
        };
        let r = decrease_instance(g)?;
        let InstanceResult::DecreaseRate { min_rate, min_norm_sq } = r.result else {
            unreachable!()
        };
        dec.add(|| case.clone(), &r, (min_norm_sq - min_rate).max(0.0));
    }
    checks.push(dec.finish(replay_dir)?);

    let pass = checks.iter().all(|c| c.pass);
    info!("theory suite: {}", if pass { "pass" } else { "FAIL" });
    Ok(TheoryReport { pass, checks })
}

/// Runs the suite and writes `theory.jsonl` (plus replay files for any
/// failure) to the output directory.
pub fn run_theory_suite(config: &ExperimentConfig) -> Result<TheoryReport> {
    let dir = config.output.dir();
    std::fs::create_dir_all(&dir)?;
    let report = run_theory_suite_in(config, Some(&dir))?;
    let mut f = BufWriter::new(std::fs::File::create(dir.join("theory.jsonl"))?);
    report.write_jsonl(&mut f)?;
    f.flush()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(fault: Fault) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk(3, 5);
        cfg.model.as_mut().unwrap().bottom = vec![6, 4];
        cfg.model.as_mut().unwrap().head_hidden = vec![];
        cfg.batch_size = 8;
        cfg.theory.lemma_instances = 10;
        cfg.theory.residual_batch_sizes = vec![4, 16];
        cfg.theory.residual_seeds = 3;
        cfg.theory.pool_factor = 2;
        cfg.theory.certify_steps = 5;
        cfg.theory.fault = fault;
        cfg
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn segment_distance() {
        assert!((distance_to_segment(&[0.0, 1.0], &[-1.0, 0.0], &[1.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((distance_to_segment(&[3.0, 0.0], &[-1.0, 0.0], &[1.0, 0.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn negated_residual_fails_with_replays_that_reproduce() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_theory_suite_in(&small(Fault::NegateResidual), Some(dir.path())).unwrap();
        assert!(!report.pass);
        let failed = report.failed_checks();
        assert!(failed.contains(&"residual_decomposition".to_string()), "{failed:?}");
        assert!(failed.contains(&"theorem1_certification".to_string()), "{failed:?}");
        assert!(!failed.contains(&"lemma1".to_string()));
        let cert = report
            .checks
            .iter()
            .find(|c| c.check == "theorem1_certification")
            .unwrap();
        let case = read_replay(&cert.replay_files[0]).unwrap();
        let first = replay(&case).unwrap();
        assert!(!first.pass);
        assert_eq!(first, replay(&case).unwrap());
    }

    #[test]
    fn replaying_a_residual_case_matches_the_sweep() {
        let cfg = small(Fault::None);
        let sweep = residual_sweep_of(&cfg);
        let reports = residual_sweep_reports(&sweep).unwrap();
        let (case, r, _) = &reports[2];
        let text = serde_json::to_string(&ReplayCase::Residual(case.clone())).unwrap();
        let back: ReplayCase = serde_json::from_str(&text).unwrap();
        assert_eq!(&replay(&back).unwrap(), r);
    }

    #[test]
    fn report_lines() {
        let report = TheoryReport {
            pass: false,
            checks: vec![CheckBuilder::new("x", "q").outcome],
        };
        let mut out = Vec::new();
        report.write_jsonl(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].contains("\"summary\""));
    }
}
