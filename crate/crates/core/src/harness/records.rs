//! Line-delimited run records and the run manifest.
//!
//! A record file is JSON Lines. The first line is the header, then one
//! line per training step, optionally followed by a single abort line:
//!
//! | field | unit / meaning |
//! |---|---|
//! | `kind` | `"header"`, `"step"` or `"abort"` |
//! | `step` | 0-based step index |
//! | `loss` | per-task batch loss before the update (nats for binary tasks, ½·squared error for regression) |
//! | `lambda` | weights applied to the processed task gradients |
//! | `raw_grad_norms` | per-task Euclidean norm of the gradient fed to the balancer (empty when not measured) |
//! | `balanced_grad_norms` | per-task norm after the balancer's processing, before weighting |
//! | `stationarity_gap` | min-norm gap at the pre-update point (quadratic testbed only) |
//! | `wall_seconds` | seconds since the run started, after this step (only with `record_timing`) |
//! | `backward_passes` | backward sweeps spent on this step |
//!
//! The header carries the schema name and version, the method, the
//! gradient source, the task count and whether `lambda` lies on the simplex.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, GradientSource};
use crate::balancers::BalancerKind;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;

pub const RECORD_SCHEMA: &str = "multibalance-records";
pub const RECORD_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA: &str = "multibalance-manifest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordHeader {
    pub schema: String,
    pub version: u32,
    pub method: BalancerKind,
    pub gradient_source: GradientSource,
    pub tasks: usize,
    pub workload: String,
    /// False for methods whose weights may leave the simplex.
    pub simplex_weights: bool,
}

impl RecordHeader {
    pub fn new(method: BalancerKind, source: GradientSource, tasks: usize, workload: &str) -> Self {
        Self {
            schema: RECORD_SCHEMA.into(),
            version: RECORD_SCHEMA_VERSION,
            method,
            gradient_source: source,
            tasks,
            workload: workload.into(),
            simplex_weights: method.simplex_weights(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub step: usize,
    pub loss: Vec<f64>,
    pub lambda: Vec<f64>,
    pub raw_grad_norms: Vec<f64>,
    pub balanced_grad_norms: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stationarity_gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_seconds: Option<f64>,
    pub backward_passes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbortRecord {
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Header(RecordHeader),
    Step(RunRecord),
    Abort(AbortRecord),
}

/// Destination for records as they are produced.
pub trait RecordSink {
    fn record(&mut self, r: &RunRecord) -> Result<()>;
    fn abort(&mut self, a: &AbortRecord) -> Result<()>;
}

/// Keeps everything in memory.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct MemorySink {
    pub records: Vec<RunRecord>,
    pub abort: Option<AbortRecord>,
}

impl RecordSink for MemorySink {
    fn record(&mut self, r: &RunRecord) -> Result<()> {
        self.records.push(r.clone());
        Ok(())
    }

    fn abort(&mut self, a: &AbortRecord) -> Result<()> {
        self.abort = Some(a.clone());
        Ok(())
    }
}

/// Discards records.
pub struct NullSink;

impl RecordSink for NullSink {
    fn record(&mut self, _: &RunRecord) -> Result<()> {
        Ok(())
    }

    fn abort(&mut self, _: &AbortRecord) -> Result<()> {
        Ok(())
    }
}

/// Streams records to a writer, header first.
pub struct RecordWriter<W: Write> {
    out: W,
    lines: usize,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(mut out: W, header: &RecordHeader) -> Result<Self> {
        write_line(&mut out, &Line::Header(header.clone()))?;
        Ok(Self { out, lines: 0 })
    }

    /// Data lines written so far (header excluded).
    pub fn lines(&self) -> usize {
        self.lines
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

fn write_line<W: Write>(out: &mut W, line: &Line) -> Result<()> {
    serde_json::to_writer(&mut *out, line)?;
    out.write_all(b"\n")?;
    Ok(())
}

impl<W: Write> RecordSink for RecordWriter<W> {
    fn record(&mut self, r: &RunRecord) -> Result<()> {
        let finite = r
            .loss
            .iter()
            .chain(&r.lambda)
            .chain(&r.raw_grad_norms)
            .chain(&r.balanced_grad_norms)
            .chain(r.stationarity_gap.iter())
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("run record"));
        }
        write_line(&mut self.out, &Line::Step(r.clone()))?;
        self.lines += 1;
        Ok(())
    }

    fn abort(&mut self, a: &AbortRecord) -> Result<()> {
        write_line(&mut self.out, &Line::Abort(a.clone()))?;
        self.lines += 1;
        self.out.flush()?;
        Ok(())
    }
}

/// Opens `path` (creating parent directories) for streaming records.
pub fn create_record_file(path: &Path, header: &RecordHeader) -> Result<RecordWriter<BufWriter<std::fs::File>>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    RecordWriter::new(BufWriter::new(std::fs::File::create(path)?), header)
}

pub fn emit_records(header: &RecordHeader, records: &[RunRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = create_record_file(path.as_ref(), header)?;
    for r in records {
        w.record(r)?;
    }
    w.finish()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordFile {
    pub header: RecordHeader,
    pub records: Vec<RunRecord>,
    pub abort: Option<AbortRecord>,
}

pub fn parse_records(input: impl Read) -> Result<RecordFile> {
    let mut lines = BufReader::new(input).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Parse("record file is empty".into()))??;
    let header = match serde_json::from_str::<Line>(&first)? {
        Line::Header(h) => h,
        _ => return Err(Error::Parse("record file does not start with a header".into())),
    };
    if header.schema != RECORD_SCHEMA || header.version != RECORD_SCHEMA_VERSION {
        return Err(Error::Parse(format!(
            "unsupported record schema {} v{}",
            header.schema, header.version
        )));
    }
    let mut records = Vec::new();
    let mut abort = None;
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if abort.is_some() {
            return Err(Error::Parse(format!("line {}: data after the abort line", n + 2)));
        }
        match serde_json::from_str::<Line>(&line)? {
            Line::Step(r) => records.push(r),
            Line::Abort(a) => abort = Some(a),
            Line::Header(_) => return Err(Error::Parse(format!("line {}: second header", n + 2))),
        }
    }
    Ok(RecordFile { header, records, abort })
}

pub fn read_records(path: impl AsRef<Path>) -> Result<RecordFile> {
    parse_records(std::fs::File::open(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Diverged,
}

/// Summary written next to each record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub version: u32,
    pub crate_version: String,
    pub method: BalancerKind,
    pub status: RunStatus,
    pub steps_requested: usize,
    pub steps_completed: usize,
    pub records_path: Option<PathBuf>,
    pub record_lines: usize,
    pub final_loss: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(std::fs::File::open(path)?))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header() -> RecordHeader {
        RecordHeader::new(
            BalancerKind::Multibalance,
            GradientSource::Representation,
            2,
            "synthetic",
        )
    }

    #[test]
    fn empty_stream_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/empty.jsonl");
        emit_records(&header(), &[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        let parsed = read_records(&path).unwrap();
        assert_eq!(parsed.header, header());
        assert!(parsed.records.is_empty() && parsed.abort.is_none());
    }

    #[test]
    fn abort_line_is_parsed() {
        let mut w = RecordWriter::new(Vec::new(), &header()).unwrap();
        w.abort(&AbortRecord {
            step: 4,
            reason: "loss inf".into(),
        })
        .unwrap();
        let parsed = parse_records(w.finish().unwrap().as_slice()).unwrap();
        assert_eq!(parsed.abort.unwrap().step, 4);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(parse_records("".as_bytes()).is_err());
        assert!(parse_records("{\"kind\":\"step\"}\n".as_bytes()).is_err());
        let mut w = RecordWriter::new(Vec::new(), &header()).unwrap();
        w.abort(&AbortRecord {
            step: 0,
            reason: "x".into(),
        })
        .unwrap();
        let mut bytes = w.finish().unwrap();
        bytes.extend_from_slice(b"{\"kind\":\"abort\",\"step\":1,\"reason\":\"y\"}\n");
        assert!(parse_records(bytes.as_slice()).is_err());
    }

    #[test]
    fn non_finite_records_are_refused() {
        let mut w = RecordWriter::new(Vec::new(), &header()).unwrap();
        let r = RunRecord {
            step: 0,
            loss: vec![f64::NAN],
            lambda: vec![1.0],
            raw_grad_norms: vec![],
            balanced_grad_norms: vec![],
            stationarity_gap: None,
            wall_seconds: None,
            backward_passes: 1,
        };
        assert!(w.record(&r).is_err());
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO
    }

    proptest! {
        #[test]
        fn records_round_trip(
            step in any::<usize>(),
            loss in prop::collection::vec(finite(), 0..4),
            lambda in prop::collection::vec(finite(), 0..4),
            gap in prop::option::of(finite()),
            wall in prop::option::of(0.0..1e6f64),
            passes in 0usize..10,
        ) {
            let r = RunRecord {
                step,
                raw_grad_norms: loss.clone(),
                balanced_grad_norms: lambda.clone(),
                loss,
                lambda,
                stationarity_gap: gap,
                wall_seconds: wall,
                backward_passes: passes,
            };
            let mut w = RecordWriter::new(Vec::new(), &header()).unwrap();
            w.record(&r).unwrap();
            let parsed = parse_records(w.finish().unwrap().as_slice()).unwrap();
            prop_assert_eq!(parsed.records, vec![r]);
        }
    }
}
