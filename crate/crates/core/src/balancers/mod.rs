//! Gradient and loss balancers behind one interface.
//!
//! Every gradient balancer maps a gradient matrix (one column per task) to
//! a [`BalanceOutcome`] whose aggregate equals `processed · weights`. Which
//! gradients are fed in (representation taps or full parameter gradients)
//! is the caller's choice; the arithmetic is the same.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, solve_linear, DenseMatrix, DenseVector, SeededRng};
use crate::simplex::{
    combine_columns, min_norm_weights, regularized_weight_step, SimplexWeights, StepMode, DEFAULT_MIN_NORM_MAX_ITER,
    DEFAULT_MIN_NORM_TOL,
};

#[cfg(test)]
mod tests;

/// Which balancing rule to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BalancerKind {
    /// Plain sum of task gradients.
    Vanilla,
    Multibalance,
    Mgda,
    /// Min-norm weights on exponentially tracked gradients.
    Moco,
    Pcgrad,
    Gradvac,
    Graddrop,
    Dbmtl,
    Imtlg,
    Uncertainty,
}

impl BalancerKind {
    pub const ALL: [BalancerKind; 10] = [
        BalancerKind::Vanilla,
        BalancerKind::Multibalance,
        BalancerKind::Mgda,
        BalancerKind::Moco,
        BalancerKind::Pcgrad,
        BalancerKind::Gradvac,
        BalancerKind::Graddrop,
        BalancerKind::Dbmtl,
        BalancerKind::Imtlg,
        BalancerKind::Uncertainty,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BalancerKind::Vanilla => "vanilla",
            BalancerKind::Multibalance => "multibalance",
            BalancerKind::Mgda => "mgda",
            BalancerKind::Moco => "moco",
            BalancerKind::Pcgrad => "pcgrad",
            BalancerKind::Gradvac => "gradvac",
            BalancerKind::Graddrop => "graddrop",
            BalancerKind::Dbmtl => "dbmtl",
            BalancerKind::Imtlg => "imtlg",
            BalancerKind::Uncertainty => "uncertainty",
        }
    }

    /// Whether emitted weights live on the simplex.
    pub fn simplex_weights(self) -> bool {
        matches!(
            self,
            BalancerKind::Multibalance
                | BalancerKind::Mgda
                | BalancerKind::Moco
                | BalancerKind::Pcgrad
                | BalancerKind::Gradvac
        )
    }
}

impl std::fmt::Display for BalancerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Hyperparameters shared by the balancers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BalancerParams {
    /// Weight learning rate.
    pub beta: f64,
    /// Pull towards the prior weights.
    pub rho: f64,
    /// Moving-average rate for gradient norms (MultiBalance) and tracked
    /// gradients (MoCo).
    pub gamma: f64,
    pub cosine_mode: bool,
    /// Prior weights; uniform when absent.
    pub lambda0: Option<Vec<f64>>,
    /// Moving-average rate of the Gradient Vaccine cosine targets.
    pub vaccine_rate: f64,
    /// Step size for the Uncertainty log-variances; the optimizer's learning
    /// rate when absent.
    pub uncertainty_lr: Option<f64>,
    pub min_norm_tol: f64,
    pub min_norm_max_iter: usize,
}

impl Default for BalancerParams {
    fn default() -> Self {
        Self {
            beta: 1.0,
            rho: 0.1,
            gamma: 0.01,
            cosine_mode: true,
            lambda0: None,
            vaccine_rate: 0.01,
            uncertainty_lr: None,
            min_norm_tol: DEFAULT_MIN_NORM_TOL,
            min_norm_max_iter: DEFAULT_MIN_NORM_MAX_ITER,
        }
    }
}

/// Mutable state carried between steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancerState {
    pub lambda: SimplexWeights,
    /// Moving averages of gradient norms; empty until the first step, which
    /// seeds them with the observed norms.
    pub ema_norms: Vec<f64>,
    pub lambda0: SimplexWeights,
    pub rho: f64,
    pub beta: f64,
    pub gamma: f64,
    pub cosine_mode: bool,
    /// Gradient Vaccine cosine targets, row `i` column `j` for the pair
    /// that adjusts task `i` using task `j`.
    pub pairwise_cos_ema: DenseMatrix,
    pub pairwise_seen: Vec<bool>,
    pub vaccine_rate: f64,
    pub tracked_grads: Option<DenseMatrix>,
    pub log_vars: Vec<f64>,
    pub uncertainty_lr: f64,
    pub min_norm_tol: f64,
    pub min_norm_max_iter: usize,
    pub step: usize,
}

impl BalancerState {
    /// Default state for `m` tasks.
    pub fn new(m: usize) -> Self {
        Self::with_params(m, &BalancerParams::default()).expect("defaults are valid")
    }

    pub fn with_params(m: usize, p: &BalancerParams) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("balancer needs at least one task".into()));
        }
        if !(p.rho >= 0.0 && p.rho.is_finite()) {
            return Err(Error::InvalidArgument(format!("rho must be ≥ 0, got {}", p.rho)));
        }
        if !(p.beta > 0.0 && p.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be > 0, got {}", p.beta)));
        }
        if !(0.0..=1.0).contains(&p.gamma) {
            return Err(Error::InvalidArgument(format!(
                "gamma must lie in [0, 1], got {}",
                p.gamma
            )));
        }
        if !(0.0..=1.0).contains(&p.vaccine_rate) {
            return Err(Error::InvalidArgument(format!(
                "vaccine_rate must lie in [0, 1], got {}",
                p.vaccine_rate
            )));
        }
        let lambda0 = match &p.lambda0 {
            Some(w) if w.len() != m => return Err(Error::dims("lambda0", m, w.len())),
            Some(w) => SimplexWeights::new(w.clone())?,
            None => SimplexWeights::uniform(m),
        };
        Ok(Self {
            lambda: SimplexWeights::uniform(m),
            ema_norms: Vec::new(),
            lambda0,
            rho: p.rho,
            beta: p.beta,
            gamma: p.gamma,
            cosine_mode: p.cosine_mode,
            pairwise_cos_ema: DenseMatrix::zeros(m, m),
            pairwise_seen: vec![false; m * m],
            vaccine_rate: p.vaccine_rate,
            tracked_grads: None,
            log_vars: vec![0.0; m],
            uncertainty_lr: p.uncertainty_lr.unwrap_or(0.0),
            min_norm_tol: p.min_norm_tol,
            min_norm_max_iter: p.min_norm_max_iter,
            step: 0,
        })
    }

    pub fn task_count(&self) -> usize {
        self.lambda.dim()
    }

    pub fn step_mode(&self) -> StepMode {
        if self.cosine_mode {
            StepMode::Cosine
        } else {
            StepMode::InnerProduct
        }
    }

    fn check(&self, g: &DenseMatrix, ctx: &'static str) -> Result<()> {
        if g.cols() != self.task_count() {
            return Err(Error::dims(ctx, self.task_count(), g.cols()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(ctx));
        }
        Ok(())
    }
}

/// Weights applied to the processed per-task gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "lowercase")]
pub enum TaskWeights {
    Simplex(SimplexWeights),
    Unconstrained(Vec<f64>),
}

impl TaskWeights {
    pub fn as_slice(&self) -> &[f64] {
        match self {
            TaskWeights::Simplex(w) => w.as_slice(),
            TaskWeights::Unconstrained(w) => w,
        }
    }

    pub fn is_simplex(&self) -> bool {
        matches!(self, TaskWeights::Simplex(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceOutcome {
    pub aggregate: DenseVector,
    pub weights: TaskWeights,
    /// Per-task gradients after the method's processing (rescaling,
    /// projection, tracking, masking).
    pub processed: DenseMatrix,
}

impl BalanceOutcome {
    fn new(processed: DenseMatrix, weights: TaskWeights) -> Result<Self> {
        let aggregate = combine_columns(&processed, weights.as_slice());
        if !aggregate.is_finite() {
            return Err(Error::NonFinite("balancer aggregate"));
        }
        Ok(Self {
            aggregate,
            weights,
            processed,
        })
    }
}

fn uniform_weights(m: usize) -> TaskWeights {
    TaskWeights::Simplex(SimplexWeights::uniform(m))
}

/// Sum of the columns.
pub fn vanilla_step(g: &DenseMatrix) -> Result<BalanceOutcome> {
    BalanceOutcome::new(g.clone(), TaskWeights::Unconstrained(vec![1.0; g.cols()]))
}

/// Moving-average norm stabilisation followed by one regularized projected
/// step on the task weights.
pub fn multibalance_step(v: &DenseMatrix, state: &mut BalancerState) -> Result<BalanceOutcome> {
    state.check(v, "multibalance_step")?;
    let norms = v.column_norms();
    if state.ema_norms.len() != norms.len() {
        state.ema_norms = norms.clone();
    } else {
        let gamma = state.gamma;
        for (u, n) in state.ema_norms.iter_mut().zip(&norms) {
            *u = (1.0 - gamma) * *u + gamma * n;
        }
    }
    let mut rescaled = v.clone();
    for (m, (&n, &u)) in norms.iter().zip(&state.ema_norms).enumerate() {
        if n > 0.0 {
            let col: Vec<f64> = v.column(m).iter().map(|x| x * (u / n)).collect();
            rescaled.set_column(m, &col);
        }
    }
    let lambda = regularized_weight_step(
        &state.lambda,
        &rescaled,
        &state.lambda0,
        state.rho,
        state.beta,
        state.step_mode(),
    )?;
    state.lambda = lambda.clone();
    state.step += 1;
    BalanceOutcome::new(rescaled, TaskWeights::Simplex(lambda))
}

fn min_norm_outcome(g: DenseMatrix, tol: f64, max_iter: usize) -> Result<BalanceOutcome> {
    let res = min_norm_weights(&g, tol, max_iter)?;
    BalanceOutcome::new(g, TaskWeights::Simplex(res.weights))
}

pub fn mgda_step(g: &DenseMatrix) -> Result<BalanceOutcome> {
    if g.cols() == 0 {
        return Err(Error::InvalidArgument("mgda_step needs at least one task".into()));
    }
    min_norm_outcome(g.clone(), DEFAULT_MIN_NORM_TOL, DEFAULT_MIN_NORM_MAX_ITER)
}

/// Exponentially tracked gradients (tracker starts at zero, rate `gamma`),
/// then min-norm weights on the tracked matrix.
pub fn moco_step(g: &DenseMatrix, state: &mut BalancerState) -> Result<BalanceOutcome> {
    state.check(g, "moco_step")?;
    let gamma = state.gamma;
    let tracked = match state.tracked_grads.take() {
        Some(t) if t.rows() == g.rows() && t.cols() == g.cols() => t,
        _ => DenseMatrix::zeros(g.rows(), g.cols()),
    };
    let data = tracked
        .as_slice()
        .iter()
        .zip(g.as_slice())
        .map(|(t, x)| (1.0 - gamma) * t + gamma * x)
        .collect();
    let tracked = DenseMatrix::from_row_major(g.rows(), g.cols(), data)?;
    state.tracked_grads = Some(tracked.clone());
    state.step += 1;
    let out = min_norm_outcome(tracked, state.min_norm_tol, state.min_norm_max_iter)?;
    state.lambda = match &out.weights {
        TaskWeights::Simplex(w) => w.clone(),
        TaskWeights::Unconstrained(_) => unreachable!("min-norm weights are on the simplex"),
    };
    Ok(out)
}

/// Projects each gradient onto the normal plane of every other gradient it
/// conflicts with, visiting the others in a random order.
pub fn pcgrad_step(g: &DenseMatrix, rng: &mut SeededRng) -> Result<BalanceOutcome> {
    let m = g.cols();
    let cols = g.columns();
    let sq: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let mut gi = cols[i].clone();
        let mut order: Vec<usize> = (0..m).filter(|&j| j != i).collect();
        rng.shuffle(&mut order);
        for j in order {
            if sq[j] == 0.0 {
                continue;
            }
            let ip = dot(&gi, &cols[j]);
            if ip < 0.0 {
                crate::linalg::axpy(-ip / sq[j], &cols[j], &mut gi);
            }
        }
        out.push(gi);
    }
    BalanceOutcome::new(columns_to_matrix(g.rows(), &out)?, uniform_weights(m))
}

fn columns_to_matrix(rows: usize, cols: &[Vec<f64>]) -> Result<DenseMatrix> {
    if cols.is_empty() {
        return Ok(DenseMatrix::zeros(rows, 0));
    }
    DenseMatrix::from_columns(cols)
}

/// Coefficient `a` such that `cos(g_i + a·g_j, g_j) = target`, given the
/// current cosine. `None` when the denominator is below the guard.
fn vaccine_coefficient(norm_i: f64, norm_j: f64, cos: f64, target: f64) -> Option<f64> {
    let sin_t = (1.0 - target * target).max(0.0).sqrt();
    let denom = norm_j * sin_t;
    if denom < 1e-12 {
        return None;
    }
    let sin_c = (1.0 - cos * cos).max(0.0).sqrt();
    Some(norm_i * (target * sin_c - cos * sin_t) / denom)
}

/// Pulls each pair of gradients towards its historical cosine. Pairs are
/// visited in ascending order of the partner index.
pub fn gradvac_step(g: &DenseMatrix, state: &mut BalancerState) -> Result<BalanceOutcome> {
    state.check(g, "gradvac_step")?;
    let m = g.cols();
    let cols = g.columns();
    let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let rate = state.vaccine_rate;
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let mut gi = cols[i].clone();
        for j in 0..m {
            if j == i || norms[j] == 0.0 {
                continue;
            }
            let ni = norm(&gi);
            if ni == 0.0 {
                break;
            }
            let cos = (dot(&gi, &cols[j]) / (ni * norms[j])).clamp(-1.0, 1.0);
            let slot = i * m + j;
            if !state.pairwise_seen[slot] {
                state.pairwise_seen[slot] = true;
                state.pairwise_cos_ema.set(i, j, cos);
            }
            let target = state.pairwise_cos_ema.get(i, j);
            if cos < target {
                if let Some(a) = vaccine_coefficient(ni, norms[j], cos, target) {
                    crate::linalg::axpy(a, &cols[j], &mut gi);
                }
            }
            let updated = ((1.0 - rate) * target + rate * cos).clamp(-1.0, 1.0);
            state.pairwise_cos_ema.set(i, j, updated);
        }
        out.push(gi);
    }
    state.step += 1;
    BalanceOutcome::new(columns_to_matrix(g.rows(), &out)?, uniform_weights(m))
}

/// Per coordinate, keeps either the positive or the negative entries,
/// choosing positive with probability equal to the positive share of mass.
pub fn graddrop_step(g: &DenseMatrix, rng: &mut SeededRng) -> Result<BalanceOutcome> {
    let (rows, m) = (g.rows(), g.cols());
    let mut masked = g.clone();
    for k in 0..rows {
        let row = g.row(k);
        let pos: f64 = row.iter().filter(|x| **x > 0.0).sum();
        let total: f64 = row.iter().map(|x| x.abs()).sum();
        let purity = if total > 0.0 { pos / total } else { 0.5 };
        let keep_positive = rng.uniform() < purity;
        for (x, out) in row.iter().zip(masked.row_mut(k)) {
            if (keep_positive && *x < 0.0) || (!keep_positive && *x > 0.0) {
                *out = 0.0;
            }
        }
    }
    BalanceOutcome::new(masked, TaskWeights::Unconstrained(vec![1.0; m]))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Rescales every nonzero gradient to the median norm of the nonzero
/// gradients (mean of the two middle norms for an even count).
pub fn dbmtl_step(g: &DenseMatrix) -> Result<BalanceOutcome> {
    let norms = g.column_norms();
    let mut nonzero: Vec<f64> = norms.iter().copied().filter(|n| *n > 0.0).collect();
    let mut rescaled = g.clone();
    if !nonzero.is_empty() {
        let target = median(&mut nonzero);
        for (m, &n) in norms.iter().enumerate() {
            if n > 0.0 {
                let col: Vec<f64> = g.column(m).iter().map(|x| x * (target / n)).collect();
                rescaled.set_column(m, &col);
            }
        }
    }
    BalanceOutcome::new(rescaled, TaskWeights::Unconstrained(vec![1.0; g.cols()]))
}

/// Weights (summing to one, possibly negative) whose combination has equal
/// projections onto every unit task gradient.
pub fn imtlg_step(g: &DenseMatrix) -> Result<BalanceOutcome> {
    let m = g.cols();
    if m == 0 {
        return Err(Error::InvalidArgument("imtlg_step needs at least one task".into()));
    }
    let fallback = |why: &str| {
        warn!("imtlg_step: {why}; falling back to uniform weights");
        BalanceOutcome::new(g.clone(), TaskWeights::Unconstrained(vec![1.0 / m as f64; m]))
    };
    if m == 1 {
        return BalanceOutcome::new(g.clone(), TaskWeights::Unconstrained(vec![1.0]));
    }
    let cols = g.columns();
    let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    if norms.contains(&0.0) {
        return fallback("zero gradient column");
    }
    let units: Vec<Vec<f64>> = cols
        .iter()
        .zip(&norms)
        .map(|(c, n)| c.iter().map(|x| x / n).collect())
        .collect();
    // Row r < M−1: ⟨Gα, u_0 − u_{r+1}⟩ = 0.  Last row: Σα = 1.
    let mut a = DenseMatrix::zeros(m, m);
    for r in 0..m - 1 {
        let diff: Vec<f64> = units[0].iter().zip(&units[r + 1]).map(|(x, y)| x - y).collect();
        for (j, c) in cols.iter().enumerate() {
            a.set(r, j, dot(c, &diff));
        }
    }
    for j in 0..m {
        a.set(m - 1, j, 1.0);
    }
    let mut rhs = vec![0.0; m];
    rhs[m - 1] = 1.0;
    match solve_linear(&a, &rhs, 1e-12) {
        Some(alpha) => BalanceOutcome::new(g.clone(), TaskWeights::Unconstrained(alpha)),
        None => fallback("singular projection system"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyOutcome {
    /// `Σ exp(−s_m) f_m + s_m / 2` at the pre-update log-variances.
    pub total: f64,
    /// `exp(−s_m)` at the pre-update log-variances.
    pub weights: Vec<f64>,
    pub log_vars: Vec<f64>,
}

/// Loss weighting by learned log-variances. Returns this step's weights
/// and takes one gradient step on the log-variances.
pub fn uncertainty_reweigh(losses: &[f64], state: &mut BalancerState) -> Result<UncertaintyOutcome> {
    if losses.len() != state.log_vars.len() {
        return Err(Error::dims("uncertainty_reweigh", state.log_vars.len(), losses.len()));
    }
    if losses.iter().any(|f| !f.is_finite()) {
        return Err(Error::NonFinite("uncertainty_reweigh"));
    }
    let weights: Vec<f64> = state.log_vars.iter().map(|s| (-s).exp()).collect();
    let total = losses
        .iter()
        .zip(&weights)
        .zip(&state.log_vars)
        .map(|((f, w), s)| w * f + 0.5 * s)
        .sum();
    let lr = state.uncertainty_lr;
    for ((s, w), f) in state.log_vars.iter_mut().zip(&weights).zip(losses) {
        *s -= lr * (0.5 - w * f);
    }
    state.step += 1;
    Ok(UncertaintyOutcome {
        total,
        weights,
        log_vars: state.log_vars.clone(),
    })
}

/// A balancing rule together with its state and random stream.
#[derive(Debug, Clone)]
pub struct Balancer {
    kind: BalancerKind,
    state: BalancerState,
    rng: SeededRng,
}

impl Balancer {
    pub fn new(kind: BalancerKind, m: usize, params: &BalancerParams, seed: u64) -> Result<Self> {
        Ok(Self {
            kind,
            state: BalancerState::with_params(m, params)?,
            rng: SeededRng::new(seed),
        })
    }

    pub fn kind(&self) -> BalancerKind {
        self.kind
    }

    pub fn state(&self) -> &BalancerState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut BalancerState {
        &mut self.state
    }

    /// Balances one step. `losses` are only read by Uncertainty weighting.
    pub fn balance(&mut self, g: &DenseMatrix, losses: &[f64]) -> Result<BalanceOutcome> {
        self.state.check(g, "Balancer::balance")?;
        match self.kind {
            BalancerKind::Vanilla => vanilla_step(g),
            BalancerKind::Multibalance => multibalance_step(g, &mut self.state),
            BalancerKind::Mgda => {
                let out = min_norm_outcome(g.clone(), self.state.min_norm_tol, self.state.min_norm_max_iter)?;
                if let TaskWeights::Simplex(w) = &out.weights {
                    self.state.lambda = w.clone();
                }
                Ok(out)
            }
            BalancerKind::Moco => moco_step(g, &mut self.state),
            BalancerKind::Pcgrad => pcgrad_step(g, &mut self.rng),
            BalancerKind::Gradvac => gradvac_step(g, &mut self.state),
            BalancerKind::Graddrop => graddrop_step(g, &mut self.rng),
            BalancerKind::Dbmtl => dbmtl_step(g),
            BalancerKind::Imtlg => imtlg_step(g),
            BalancerKind::Uncertainty => {
                let u = uncertainty_reweigh(losses, &mut self.state)?;
                BalanceOutcome::new(g.clone(), TaskWeights::Unconstrained(u.weights))
            }
        }
    }
}
