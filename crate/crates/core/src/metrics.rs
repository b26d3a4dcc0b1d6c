//! Normalized Entropy and per-run metric reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, SharedBottomModel, TaskKind, PROB_CLIP};

/// Mean cross-entropy of `preds` divided by the entropy of the empirical
/// base rate of `labels`. Lower is better; a constant base-rate prediction
/// scores exactly 1.
pub fn normalized_entropy(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::dims("normalized_entropy", labels.len(), preds.len()));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("normalized entropy of an empty set".into()));
    }
    if labels.iter().any(|y| *y != 0.0 && *y != 1.0) {
        return Err(Error::InvalidArgument("normalized entropy needs 0/1 labels".into()));
    }
    if preds.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("normalized_entropy"));
    }
    let n = labels.len() as f64;
    let base = labels.iter().sum::<f64>() / n;
    if base == 0.0 || base == 1.0 {
        return Err(Error::Degenerate(format!("base rate {base} has zero entropy")));
    }
    let ce: f64 = preds
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n;
    let h = -(base * base.ln() + (1.0 - base) * (1.0 - base).ln());
    Ok(ce / h)
}

/// Per-task evaluation. `ne` is `None` for regression tasks and for label
/// sets with a degenerate base rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ne: Vec<Option<f64>>,
    pub loss: Vec<f64>,
    /// Filled by [`MetricReport::with_baseline`]; positive entries are gains.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ne_diff: Vec<Option<f64>>,
}

impl MetricReport {
    pub fn evaluate(model: &SharedBottomModel, batch: &Batch) -> Result<Self> {
        let trace = model.forward(batch)?;
        let ne = model
            .task_kinds()
            .iter()
            .enumerate()
            .map(|(m, kind)| match kind {
                TaskKind::Binary => normalized_entropy(&trace.predictions(m), &batch.labels()[m]).ok(),
                TaskKind::Regression => None,
            })
            .collect();
        Ok(Self {
            ne,
            loss: trace.losses().to_vec(),
            ne_diff: Vec::new(),
        })
    }

    pub fn with_baseline(mut self, baseline: &MetricReport) -> Result<Self> {
        self.ne_diff = ne_diff(baseline, &self)?;
        Ok(self)
    }
}

/// `NE(baseline) − NE(treated)` per task.
pub fn ne_diff(baseline: &MetricReport, treated: &MetricReport) -> Result<Vec<Option<f64>>> {
    if baseline.ne.len() != treated.ne.len() {
        return Err(Error::dims("ne_diff", baseline.ne.len(), treated.ne.len()));
    }
    Ok(baseline
        .ne
        .iter()
        .zip(&treated.ne)
        .map(|(b, t)| Some((*b)? - (*t)?))
        .collect())
}
