//! Command-line driver.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 the run diverged,
//! 3 a theory check failed.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use multibalance::balancers::BalancerKind;
use multibalance::harness::config::{ExperimentConfig, GradientSource};
use multibalance::harness::theory_suite::{read_replay, replay, run_theory_suite};
use multibalance::harness::{execute, measure_throughput, run_sweep, RunStatus};
use multibalance::theory::Fault;
use multibalance::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_THEORY: u8 = 3;

#[derive(Parser)]
#[command(name = "multibalance", version, about = "Multi-task gradient balancing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration; writes records and a manifest.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Record file (overrides `output.records`).
        #[arg(long)]
        records: Option<PathBuf>,
        /// Manifest file (overrides `output.manifest`).
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Measure training throughput.
    Throughput {
        /// Defaults to the built-in wide desk network.
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        warmup: usize,
        #[arg(long, default_value_t = 200)]
        timed: usize,
        /// Also time summed-loss training, representation-mode MultiBalance
        /// and parameter-mode MGDA on the same model and data.
        #[arg(long)]
        compare: bool,
    },
    /// Run the theory-check suite, or replay one instance.
    Theory {
        /// Defaults to the built-in desk network and suite settings.
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Corrupt the residual on purpose; the suite should then fail.
        #[arg(long)]
        negate_residual: bool,
        /// Replay file written by a failing suite; prints its report.
        #[arg(long, conflicts_with_all = ["config", "negate_residual"])]
        replay: Option<PathBuf>,
    },
    /// Compare the balancer at every β of the sweep grid against the
    /// summed-loss baseline.
    Sweep {
        #[arg(short, long)]
        config: PathBuf,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: Option<&Path>) -> Result<ExperimentConfig, Error> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::desk(3, 0)),
    }
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Train {
            config,
            records,
            manifest,
            seed,
            steps,
        } => {
            let mut cfg = load(Some(&config))?;
            if records.is_some() {
                cfg.output.records = records;
            }
            if manifest.is_some() {
                cfg.output.manifest = manifest;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            cfg.validate()?;
            let m = execute(&cfg)?;
            print_json(&serde_json::json!({
                "status": m.status,
                "steps_completed": m.steps_completed,
                "final_loss": m.final_loss,
                "records": m.records_path,
                "manifest": cfg.output.manifest_path(),
                "abort_reason": m.abort_reason,
            }))?;
            Ok(match m.status {
                RunStatus::Completed => 0,
                RunStatus::Diverged => EXIT_DIVERGED,
            })
        }
        Command::Throughput {
            config,
            warmup,
            timed,
            compare,
        } => {
            let cfg = match config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::desk_wide(3, 0),
            };
            let mut runs = vec![("configured".to_string(), cfg.clone())];
            if compare {
                for (label, kind, source) in [
                    ("vanilla", BalancerKind::Vanilla, GradientSource::Representation),
                    (
                        "multibalance-representation",
                        BalancerKind::Multibalance,
                        GradientSource::Representation,
                    ),
                    ("mgda-parameter", BalancerKind::Mgda, GradientSource::Parameter),
                ] {
                    let mut c = cfg.clone();
                    c.balancer.name = kind;
                    c.training.gradient_source = source;
                    runs.push((label.to_string(), c));
                }
            }
            for (label, c) in runs {
                let t = measure_throughput(&c, warmup, timed)?;
                print_json(&serde_json::json!({
                    "run": label,
                    "method": c.balancer.name,
                    "gradient_source": c.training.gradient_source,
                    "steps_per_sec": t.steps_per_sec,
                    "samples_per_sec": t.samples_per_sec,
                    "backward_count": t.backward_count,
                }))?;
            }
            Ok(0)
        }
        Command::Theory {
            config,
            out,
            negate_residual,
            replay: replay_path,
        } => {
            if let Some(path) = replay_path {
                let case = read_replay(&path).with_context(|| format!("reading {}", path.display()))?;
                let report = replay(&case)?;
                print_json(&report)?;
                return Ok(if report.pass { 0 } else { EXIT_THEORY });
            }
            let mut cfg = load(config.as_deref())?;
            if out.is_some() {
                cfg.output.dir = out;
            }
            if negate_residual {
                cfg.theory.fault = Fault::NegateResidual;
            }
            let report = run_theory_suite(&cfg)?;
            for c in &report.checks {
                println!(
                    "{:<24} {} ({} instances, {} failed; {}: {:e})",
                    c.check,
                    if c.pass { "PASS" } else { "FAIL" },
                    c.instances,
                    c.failures,
                    c.summary_quantity,
                    c.worst
                );
            }
            println!("report: {}", cfg.output.dir().join("theory.jsonl").display());
            Ok(if report.pass { 0 } else { EXIT_THEORY })
        }
        Command::Sweep { config, out } => {
            let mut cfg = load(Some(&config))?;
            if out.is_some() {
                cfg.output.dir = out;
            }
            let report = run_sweep(&cfg)?;
            print_json(&report)?;
            let diverged = std::iter::once(&report.baseline)
                .chain(&report.runs)
                .any(|e| e.status == RunStatus::Diverged);
            Ok(if diverged { EXIT_DIVERGED } else { 0 })
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>().map(Error::root) {
        Some(Error::Divergence { .. }) => EXIT_DIVERGED,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
