//! Shared-bottom multi-task network with hand-written backpropagation.
//!
//! A stack of dense layers (the bottom) maps each input row to the shared
//! representation `Φ`. Every task head receives its own copy of `Φ`, so the
//! gradient of task `m`'s loss with respect to its copy can be read off at
//! the copy point without touching the bottom. That is the representation
//! tap: one sweep through the heads yields all `M` representation
//! gradients, and a single sweep through the bottom then propagates any
//! combination of them.
//!
//! Per-sample representation gradients are kept as `batch × repr_dim`
//! matrices that already carry the `1/|B|` factor of the mean loss, so
//! their row sum is the gradient of the mean loss with respect to a
//! batch-shared representation.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, SeededRng};

/// Cross-entropy probability clip.
pub const PROB_CLIP: f64 = 1e-12;

/// Guard on the size of an explicit per-sample Jacobian.
pub const MAX_JACOBIAN_ENTRIES: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, _z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Activation::Identity),
            "tanh" => Some(Activation::Tanh),
            "sigmoid" => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss family of a task head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Sigmoid output with clipped binary cross-entropy.
    Binary,
    /// Identity output with `½(ŷ − y)²`.
    Regression,
}

impl TaskKind {
    pub fn output_activation(self) -> Activation {
        match self {
            TaskKind::Binary => Activation::Sigmoid,
            TaskKind::Regression => Activation::Identity,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Binary => "binary",
            TaskKind::Regression => "regression",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "binary" => Some(TaskKind::Binary),
            "regression" => Some(TaskKind::Regression),
            _ => None,
        }
    }

    /// Per-sample loss and its derivative with respect to the head's
    /// pre-activation output `z` (whose activation output is `a`).
    fn loss_and_slope(self, z: f64, a: f64, y: f64) -> (f64, f64) {
        match self {
            TaskKind::Binary => {
                let p = a.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
                let loss = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
                let slope = if a == p { p - y } else { 0.0 };
                (loss, slope)
            }
            TaskKind::Regression => {
                let r = z - y;
                (0.5 * r * r, r)
            }
        }
    }
}

/// Fully connected layer `a = act(x·Wᵀ + b)` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    weight: DenseMatrix,
    bias: Vec<f64>,
    activation: Activation,
}

impl Dense {
    pub fn new(weight: DenseMatrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::dims("Dense::new (bias)", weight.rows(), bias.len()));
        }
        if !weight.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("Dense::new"));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn random(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut SeededRng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.uniform_range(-limit, limit))
            .collect();
        Self {
            weight: DenseMatrix::from_row_major(out_dim, in_dim, data).expect("shape by construction"),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            weight: DenseMatrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &DenseMatrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    fn forward(&self, x: &DenseMatrix) -> Result<LayerTrace> {
        let mut pre = x.matmul_transposed(&self.weight)?;
        for i in 0..pre.rows() {
            for (z, b) in pre.row_mut(i).iter_mut().zip(&self.bias) {
                *z += b;
            }
        }
        let mut act = pre.clone();
        act.as_mut_slice()
            .iter_mut()
            .for_each(|z| *z = self.activation.apply(*z));
        if !act.is_finite() {
            return Err(Error::NonFinite("forward"));
        }
        Ok(LayerTrace { pre, act })
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weight.as_slice());
        out.extend_from_slice(&self.bias);
    }

    fn read_params(&mut self, src: &[f64]) -> usize {
        let nw = self.weight.rows() * self.weight.cols();
        self.weight.as_mut_slice().copy_from_slice(&src[..nw]);
        let nb = self.bias.len();
        self.bias.copy_from_slice(&src[nw..nw + nb]);
        nw + nb
    }
}

/// The layers owned by one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    layers: Vec<Dense>,
    kind: TaskKind,
}

impl TaskHead {
    pub fn new(layers: Vec<Dense>, kind: TaskKind) -> Result<Self> {
        let last = layers
            .last()
            .ok_or_else(|| Error::InvalidArgument("task head needs at least one layer".into()))?;
        if last.out_dim() != 1 {
            return Err(Error::dims("TaskHead::new (output dim)", 1, last.out_dim()));
        }
        if last.activation != kind.output_activation() {
            return Err(Error::InvalidArgument(format!(
                "{} head must end in a {} layer",
                kind.name(),
                kind.output_activation().name()
            )));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dims(
                    "TaskHead::new (layer chain)",
                    pair[0].out_dim(),
                    pair[1].in_dim(),
                ));
            }
        }
        Ok(Self { layers, kind })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }
}

/// Layer widths for a randomly initialised model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArch {
    pub input_dim: usize,
    /// Output widths of the bottom layers; the last one is `repr_dim`.
    pub bottom: Vec<usize>,
    /// Hidden widths inside each head (the scalar output layer is implied).
    #[serde(default)]
    pub head_hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedBottomModel {
    input_dim: usize,
    bottom: Vec<Dense>,
    heads: Vec<TaskHead>,
    #[serde(skip)]
    version: u64,
    #[serde(skip)]
    sweeps: SweepCounter,
}

/// Counts backward sweeps through the bottom. Never affects equality.
#[derive(Debug, Clone, Default)]
struct SweepCounter(std::cell::Cell<usize>);

impl PartialEq for SweepCounter {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

/// Inputs and one label vector per task.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: DenseMatrix,
    labels: Vec<Vec<f64>>,
}

impl Batch {
    pub fn new(inputs: DenseMatrix, labels: Vec<Vec<f64>>) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::InvalidArgument("batch must contain at least one row".into()));
        }
        if labels.is_empty() {
            return Err(Error::InvalidArgument(
                "batch needs labels for at least one task".into(),
            ));
        }
        for l in &labels {
            if l.len() != inputs.rows() {
                return Err(Error::dims("Batch::new (labels)", inputs.rows(), l.len()));
            }
            if l.iter().any(|y| !y.is_finite()) {
                return Err(Error::NonFinite("Batch::new"));
            }
        }
        Ok(Self { inputs, labels })
    }

    pub fn inputs(&self) -> &DenseMatrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[Vec<f64>] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn task_count(&self) -> usize {
        self.labels.len()
    }

    /// Rows `[start, end)` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> Result<Batch> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidArgument(format!("bad batch slice {start}..{end}")));
        }
        let d = self.inputs.cols();
        let data = self.inputs.as_slice()[start * d..end * d].to_vec();
        let inputs = DenseMatrix::from_row_major(end - start, d, data)?;
        let labels = self.labels.iter().map(|l| l[start..end].to_vec()).collect();
        Batch::new(inputs, labels)
    }

    fn fingerprint(&self) -> u64 {
        // FNV-1a over the raw bits.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: f64| {
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        self.inputs.as_slice().iter().for_each(|x| eat(*x));
        self.labels.iter().flatten().for_each(|y| eat(*y));
        h ^ (self.len() as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerTrace {
    pre: DenseMatrix,
    act: DenseMatrix,
}

/// Everything the backward passes need from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    model_version: u64,
    batch_fingerprint: u64,
    input: DenseMatrix,
    bottom: Vec<LayerTrace>,
    heads: Vec<Vec<LayerTrace>>,
    losses: Vec<f64>,
}

impl ForwardTrace {
    /// `batch × repr_dim`
    pub fn representation(&self) -> &DenseMatrix {
        &self.bottom.last().expect("model has a bottom").act
    }

    /// Per-task mean losses `f_m`.
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    /// Head outputs (probabilities for binary tasks) for task `m`.
    pub fn predictions(&self, m: usize) -> Vec<f64> {
        self.heads[m].last().expect("head has layers").act.column(0)
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

/// Gradients for one stack of dense layers, laid out like the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrad>,
}

impl ParamGrads {
    fn zeros_like(layers: &[Dense]) -> Self {
        Self {
            layers: layers
                .iter()
                .map(|l| LayerGrad {
                    weight: DenseMatrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    /// Weight (row-major) then bias, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.write_flat(&mut out);
        out
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
    }

    pub fn add_scaled(&mut self, c: f64, other: &ParamGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            crate::linalg::axpy(c, b.weight.as_slice(), a.weight.as_mut_slice());
            crate::linalg::axpy(c, &b.bias, &mut a.bias);
        }
    }

    pub fn norm(&self) -> f64 {
        crate::linalg::norm(&self.flatten())
    }
}

/// Gradients for every parameter of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub bottom: ParamGrads,
    pub heads: Vec<ParamGrads>,
}

impl ModelGradients {
    /// Same order as [`SharedBottomModel::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.bottom.flatten();
        for h in &self.heads {
            h.write_flat(&mut out);
        }
        out
    }
}

/// Output of the representation tap.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationGradients {
    model_version: u64,
    batch_fingerprint: u64,
    /// One `batch × repr_dim` matrix per task: `∂f_m/∂Φ`.
    per_sample: Vec<DenseMatrix>,
    /// `∇_{φ_m} f_m`, computed during the same sweep.
    heads: Vec<ParamGrads>,
}

impl RepresentationGradients {
    pub fn task_count(&self) -> usize {
        self.per_sample.len()
    }

    pub fn per_sample(&self) -> &[DenseMatrix] {
        &self.per_sample
    }

    pub fn head_gradients(&self) -> &[ParamGrads] {
        &self.heads
    }

    /// Gradient matrix with one flattened `batch · repr_dim` column per task.
    pub fn matrix(&self) -> DenseMatrix {
        let cols: Vec<Vec<f64>> = self.per_sample.iter().map(|g| g.as_slice().to_vec()).collect();
        DenseMatrix::from_columns(&cols).expect("tap gradients are finite")
    }

    /// `repr_dim × M`: per-task gradients with respect to a representation
    /// shared by the whole batch (row sums of the per-sample matrices).
    pub fn batch_mean(&self) -> DenseMatrix {
        let cols: Vec<Vec<f64>> = self.per_sample.iter().map(row_sum).collect();
        DenseMatrix::from_columns(&cols).expect("tap gradients are finite")
    }
}

fn row_sum(g: &DenseMatrix) -> Vec<f64> {
    let mut out = vec![0.0; g.cols()];
    for i in 0..g.rows() {
        crate::linalg::axpy(1.0, g.row(i), &mut out);
    }
    out
}

/// Output of [`SharedBottomModel::backward_per_task`].
#[derive(Debug, Clone, PartialEq)]
pub struct PerTaskGradients {
    pub grads: Vec<ModelGradients>,
    /// The representation gradient met by each sweep on its way down.
    pub representation: Vec<DenseMatrix>,
}

impl PerTaskGradients {
    /// `P × M` matrix of flattened shared-parameter gradients.
    pub fn bottom_matrix(&self) -> DenseMatrix {
        let cols: Vec<Vec<f64>> = self.grads.iter().map(|g| g.bottom.flatten()).collect();
        DenseMatrix::from_columns(&cols).expect("gradients are finite")
    }

    /// Same as [`RepresentationGradients::batch_mean`].
    pub fn representation_mean(&self) -> DenseMatrix {
        let cols: Vec<Vec<f64>> = self.representation.iter().map(row_sum).collect();
        DenseMatrix::from_columns(&cols).expect("gradients are finite")
    }
}

/// Explicit Jacobians of the representation with respect to the flattened
/// bottom parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprJacobian {
    /// One `repr_dim × P` matrix per sample.
    pub per_sample: Vec<DenseMatrix>,
    pub mean: DenseMatrix,
}

impl SharedBottomModel {
    pub fn new(input_dim: usize, bottom: Vec<Dense>, heads: Vec<TaskHead>) -> Result<Self> {
        let first = bottom
            .first()
            .ok_or_else(|| Error::InvalidArgument("model needs at least one bottom layer".into()))?;
        if first.in_dim() != input_dim {
            return Err(Error::dims("SharedBottomModel::new (input)", input_dim, first.in_dim()));
        }
        for pair in bottom.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dims(
                    "SharedBottomModel::new (bottom chain)",
                    pair[0].out_dim(),
                    pair[1].in_dim(),
                ));
            }
        }
        if heads.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one task head".into()));
        }
        let repr_dim = bottom.last().expect("non-empty").out_dim();
        for h in &heads {
            if h.in_dim() != repr_dim {
                return Err(Error::dims("SharedBottomModel::new (head input)", repr_dim, h.in_dim()));
            }
        }
        Ok(Self {
            input_dim,
            bottom,
            heads,
            version: 0,
            sweeps: SweepCounter::default(),
        })
    }

    /// Tanh bottom and hidden head layers, Glorot initialisation.
    pub fn random(arch: &ModelArch, kinds: &[TaskKind], rng: &mut SeededRng) -> Result<Self> {
        if arch.bottom.is_empty() || arch.bottom.contains(&0) || arch.input_dim == 0 {
            return Err(Error::InvalidArgument(
                "layer widths must be positive and the bottom non-empty".into(),
            ));
        }
        let mut bottom = Vec::new();
        let mut prev = arch.input_dim;
        for &w in &arch.bottom {
            bottom.push(Dense::random(prev, w, Activation::Tanh, rng));
            prev = w;
        }
        let repr_dim = prev;
        let mut heads = Vec::new();
        for &kind in kinds {
            let mut layers = Vec::new();
            let mut p = repr_dim;
            for &w in &arch.head_hidden {
                layers.push(Dense::random(p, w, Activation::Tanh, rng));
                p = w;
            }
            layers.push(Dense::random(p, 1, kind.output_activation(), rng));
            heads.push(TaskHead::new(layers, kind)?);
        }
        Self::new(arch.input_dim, bottom, heads)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn repr_dim(&self) -> usize {
        self.bottom.last().expect("non-empty").out_dim()
    }

    pub fn task_count(&self) -> usize {
        self.heads.len()
    }

    pub fn bottom(&self) -> &[Dense] {
        &self.bottom
    }

    pub fn heads(&self) -> &[TaskHead] {
        &self.heads
    }

    pub fn task_kinds(&self) -> Vec<TaskKind> {
        self.heads.iter().map(|h| h.kind).collect()
    }

    /// Bumped on every parameter mutation; traces remember it.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Backward sweeps through the shared bottom performed so far.
    pub fn bottom_sweeps(&self) -> usize {
        self.sweeps.0.get()
    }

    pub fn bottom_param_count(&self) -> usize {
        self.bottom.iter().map(Dense::param_count).sum()
    }

    pub fn param_count(&self) -> usize {
        self.bottom_param_count()
            + self
                .heads
                .iter()
                .flat_map(|h| &h.layers)
                .map(Dense::param_count)
                .sum::<usize>()
    }

    /// All parameters: bottom layers, then each head in task order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.bottom.iter().chain(self.heads.iter().flat_map(|h| &h.layers)) {
            l.write_params(&mut out);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::dims("set_flat_params", self.param_count(), params.len()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("set_flat_params"));
        }
        let mut offset = 0;
        for l in self
            .bottom
            .iter_mut()
            .chain(self.heads.iter_mut().flat_map(|h| &mut h.layers))
        {
            offset += l.read_params(&params[offset..]);
        }
        self.version += 1;
        Ok(())
    }

    /// `θ ← θ + delta` in flat parameter order.
    pub fn apply_delta(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.param_count() {
            return Err(Error::dims("apply_delta", self.param_count(), delta.len()));
        }
        let mut p = self.flat_params();
        crate::linalg::axpy(1.0, delta, &mut p);
        self.set_flat_params(&p)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.inputs.cols() != self.input_dim {
            return Err(Error::dims("batch input dim", self.input_dim, batch.inputs.cols()));
        }
        if batch.task_count() != self.task_count() {
            return Err(Error::dims("batch task count", self.task_count(), batch.task_count()));
        }
        Ok(())
    }

    fn bottom_forward(&self, inputs: &DenseMatrix) -> Result<Vec<LayerTrace>> {
        let mut traces: Vec<LayerTrace> = Vec::with_capacity(self.bottom.len());
        for l in &self.bottom {
            let x = traces.last().map_or(inputs, |t| &t.act);
            let t = l.forward(x)?;
            traces.push(t);
        }
        Ok(traces)
    }

    /// Forward pass: representation, one copy per head, per-task mean losses.
    pub fn forward(&self, batch: &Batch) -> Result<ForwardTrace> {
        self.check_batch(batch)?;
        let bottom = self.bottom_forward(&batch.inputs)?;
        let repr = &bottom.last().expect("non-empty").act;
        let n = batch.len() as f64;
        let mut heads = Vec::with_capacity(self.heads.len());
        let mut losses = Vec::with_capacity(self.heads.len());
        for (head, labels) in self.heads.iter().zip(&batch.labels) {
            let mut traces: Vec<LayerTrace> = Vec::with_capacity(head.layers.len());
            for l in &head.layers {
                let x = traces.last().map_or(repr, |t| &t.act);
                let t = l.forward(x)?;
                traces.push(t);
            }
            let out = traces.last().expect("non-empty");
            let loss: f64 = (0..batch.len())
                .map(|i| {
                    head.kind
                        .loss_and_slope(out.pre.get(i, 0), out.act.get(i, 0), labels[i])
                        .0
                })
                .sum::<f64>()
                / n;
            if !loss.is_finite() {
                return Err(Error::NonFinite("forward (loss)"));
            }
            losses.push(loss);
            heads.push(traces);
        }
        Ok(ForwardTrace {
            model_version: self.version,
            batch_fingerprint: batch.fingerprint(),
            input: batch.inputs.clone(),
            bottom,
            heads,
            losses,
        })
    }

    /// Head outputs for `inputs`, one vector per task.
    pub fn predict(&self, inputs: &DenseMatrix) -> Result<Vec<Vec<f64>>> {
        if inputs.cols() != self.input_dim {
            return Err(Error::dims("predict input dim", self.input_dim, inputs.cols()));
        }
        let bottom = self.bottom_forward(inputs)?;
        let repr = &bottom.last().expect("non-empty").act;
        self.heads
            .iter()
            .map(|h| {
                let mut x = repr.clone();
                for l in &h.layers {
                    x = l.forward(&x)?.act;
                }
                Ok(x.column(0))
            })
            .collect()
    }

    fn check_trace(&self, trace: &ForwardTrace, batch: Option<&Batch>) -> Result<()> {
        if trace.model_version != self.version || trace.heads.len() != self.heads.len() {
            return Err(Error::StaleTrace);
        }
        if let Some(b) = batch {
            if b.fingerprint() != trace.batch_fingerprint {
                return Err(Error::StaleTrace);
            }
        }
        Ok(())
    }

    /// One sweep through head `m`: returns `∂f_m/∂Φ` (per sample) and
    /// `∇_{φ_m} f_m`.
    fn head_backward(&self, trace: &ForwardTrace, labels: &[f64], m: usize) -> (DenseMatrix, ParamGrads) {
        let head = &self.heads[m];
        let traces = &trace.heads[m];
        let n = trace.batch_size();
        let out = traces.last().expect("non-empty");
        let mut dz = DenseMatrix::zeros(n, 1);
        for i in 0..n {
            let slope = head
                .kind
                .loss_and_slope(out.pre.get(i, 0), out.act.get(i, 0), labels[i])
                .1;
            dz.set(i, 0, slope / n as f64);
        }
        let repr = trace.representation();
        let mut grads = ParamGrads::zeros_like(&head.layers);
        let upstream = backward_layers(&head.layers, traces, repr, dz, true, &mut grads, true)
            .expect("head input gradient requested");
        (upstream, grads)
    }

    fn bottom_backward(&self, trace: &ForwardTrace, d_repr: DenseMatrix) -> ParamGrads {
        self.sweeps.0.set(self.sweeps.0.get() + 1);
        let mut grads = ParamGrads::zeros_like(&self.bottom);
        backward_layers(
            &self.bottom,
            &trace.bottom,
            &trace.input,
            d_repr,
            false,
            &mut grads,
            false,
        );
        grads
    }

    /// The representation tap: a single sweep through all heads yielding
    /// `∂f_m/∂Φ` for every task at its copy of the representation. The
    /// bottom is not touched.
    pub fn backward_representation_tap(&self, trace: &ForwardTrace, batch: &Batch) -> Result<RepresentationGradients> {
        self.check_batch(batch)?;
        self.check_trace(trace, Some(batch))?;
        let mut per_sample = Vec::with_capacity(self.heads.len());
        let mut heads = Vec::with_capacity(self.heads.len());
        for m in 0..self.heads.len() {
            let (g, h) = self.head_backward(trace, &batch.labels[m], m);
            per_sample.push(g);
            heads.push(h);
        }
        Ok(RepresentationGradients {
            model_version: trace.model_version,
            batch_fingerprint: trace.batch_fingerprint,
            per_sample,
            heads,
        })
    }

    /// Continues the backward pass from the representation with an
    /// arbitrary representation gradient `h` and returns `∇_W` of the
    /// surrogate whose representation gradient is `h`, alongside each head's
    /// own unweighted gradient from the tap.
    ///
    /// `h` is either a flattened `batch × repr_dim` matrix (row-major) or a
    /// single `repr_dim` vector, which is read as a gradient with respect to
    /// a representation shared by all rows (each row receives `h / batch`).
    pub fn backward_apply_aggregate(
        &self,
        trace: &ForwardTrace,
        taps: &RepresentationGradients,
        h: &[f64],
    ) -> Result<ModelGradients> {
        self.check_trace(trace, None)?;
        if taps.model_version != trace.model_version || taps.batch_fingerprint != trace.batch_fingerprint {
            return Err(Error::StaleTrace);
        }
        let n = trace.batch_size();
        let d = self.repr_dim();
        let d_repr = if h.len() == n * d {
            DenseMatrix::from_row_major(n, d, h.to_vec())?
        } else if h.len() == d {
            let mut m = DenseMatrix::zeros(n, d);
            let scale = 1.0 / n as f64;
            for i in 0..n {
                for (o, x) in m.row_mut(i).iter_mut().zip(h) {
                    *o = scale * x;
                }
            }
            m
        } else {
            return Err(Error::dims("backward_apply_aggregate", n * d, h.len()));
        };
        Ok(ModelGradients {
            bottom: self.bottom_backward(trace, d_repr),
            heads: taps.heads.clone(),
        })
    }

    /// `M` independent full backward sweeps, one per task loss.
    pub fn backward_per_task(&self, trace: &ForwardTrace, batch: &Batch) -> Result<PerTaskGradients> {
        self.check_batch(batch)?;
        self.check_trace(trace, Some(batch))?;
        let m = self.heads.len();
        let mut grads = Vec::with_capacity(m);
        let mut representation = Vec::with_capacity(m);
        for task in 0..m {
            let (d_repr, head_grads) = self.head_backward(trace, &batch.labels[task], task);
            let bottom = self.bottom_backward(trace, d_repr.clone());
            let mut heads: Vec<ParamGrads> = self.heads.iter().map(|h| ParamGrads::zeros_like(&h.layers)).collect();
            heads[task] = head_grads;
            grads.push(ModelGradients { bottom, heads });
            representation.push(d_repr);
        }
        Ok(PerTaskGradients { grads, representation })
    }

    /// Gradient of `Σ_m f_m` in one backward pass: every head's
    /// representation gradient is summed at the copy point and propagated
    /// through the bottom once.
    pub fn backward_summed(&self, trace: &ForwardTrace, batch: &Batch) -> Result<ModelGradients> {
        let taps = self.backward_representation_tap(trace, batch)?;
        let mut sum = DenseMatrix::zeros(trace.batch_size(), self.repr_dim());
        for g in &taps.per_sample {
            crate::linalg::axpy(1.0, g.as_slice(), sum.as_mut_slice());
        }
        self.backward_apply_aggregate(trace, &taps, sum.as_slice())
    }

    fn check_jacobian_size(&self) -> Result<()> {
        let entries = self.repr_dim() * self.bottom_param_count();
        if entries > MAX_JACOBIAN_ENTRIES {
            return Err(Error::InvalidArgument(format!(
                "representation Jacobian would have {entries} entries (limit {MAX_JACOBIAN_ENTRIES})"
            )));
        }
        Ok(())
    }

    /// Per-sample Jacobians `∂Φ(x_i)/∂W` (`repr_dim × P`) and their mean.
    pub fn jacobian_repr(&self, batch: &Batch) -> Result<ReprJacobian> {
        self.check_jacobian_size()?;
        if batch.inputs.cols() != self.input_dim {
            return Err(Error::dims(
                "jacobian_repr input dim",
                self.input_dim,
                batch.inputs.cols(),
            ));
        }
        let traces = self.bottom_forward(&batch.inputs)?;
        let mut mean = DenseMatrix::zeros(self.repr_dim(), self.bottom_param_count());
        let mut per_sample = Vec::with_capacity(batch.len());
        let scale = 1.0 / batch.len() as f64;
        for i in 0..batch.len() {
            let j = self.sample_jacobian(&batch.inputs, &traces, i);
            crate::linalg::axpy(scale, j.as_slice(), mean.as_mut_slice());
            per_sample.push(j);
        }
        Ok(ReprJacobian { per_sample, mean })
    }

    /// Mean Jacobian only; memory stays at one `repr_dim × P` matrix however
    /// many rows `inputs` has.
    pub fn mean_jacobian_repr(&self, inputs: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_jacobian_size()?;
        if inputs.cols() != self.input_dim {
            return Err(Error::dims(
                "mean_jacobian_repr input dim",
                self.input_dim,
                inputs.cols(),
            ));
        }
        if inputs.rows() == 0 {
            return Err(Error::InvalidArgument("mean Jacobian of an empty pool".into()));
        }
        let traces = self.bottom_forward(inputs)?;
        let mut mean = DenseMatrix::zeros(self.repr_dim(), self.bottom_param_count());
        let scale = 1.0 / inputs.rows() as f64;
        for i in 0..inputs.rows() {
            let j = self.sample_jacobian(inputs, &traces, i);
            crate::linalg::axpy(scale, j.as_slice(), mean.as_mut_slice());
        }
        Ok(mean)
    }

    fn sample_jacobian(&self, inputs: &DenseMatrix, traces: &[LayerTrace], row: usize) -> DenseMatrix {
        let d = self.repr_dim();
        let p = self.bottom_param_count();
        let mut jac = DenseMatrix::zeros(d, p);
        let offsets: Vec<usize> = self
            .bottom
            .iter()
            .scan(0, |acc, l| {
                let o = *acc;
                *acc += l.param_count();
                Some(o)
            })
            .collect();
        for k in 0..d {
            let mut delta = vec![0.0; d];
            delta[k] = 1.0;
            let out = jac.row_mut(k);
            for (li, layer) in self.bottom.iter().enumerate().rev() {
                let t = &traces[li];
                let a_in = if li == 0 {
                    inputs.row(row)
                } else {
                    traces[li - 1].act.row(row)
                };
                let dz: Vec<f64> = delta
                    .iter()
                    .zip(t.pre.row(row).iter().zip(t.act.row(row)))
                    .map(|(g, (z, a))| g * layer.activation.derivative(*z, *a))
                    .collect();
                let base = offsets[li];
                let in_dim = layer.in_dim();
                for (o, dzo) in dz.iter().enumerate() {
                    if *dzo == 0.0 {
                        continue;
                    }
                    let w_row = &mut out[base + o * in_dim..base + (o + 1) * in_dim];
                    for (w, a) in w_row.iter_mut().zip(a_in) {
                        *w = dzo * a;
                    }
                }
                let b_off = base + layer.out_dim() * in_dim;
                out[b_off..b_off + layer.out_dim()].copy_from_slice(&dz);
                if li > 0 {
                    delta = layer.weight.transposed_matvec(&dz).expect("layer shapes chain");
                }
            }
        }
        jac
    }
}

/// Backpropagates through `layers` given the upstream gradient at the last
/// layer's output (or directly at its pre-activation when
/// `upstream_is_preactivation`). Accumulates parameter gradients into
/// `grads` and returns the gradient at the stack's input when asked.
fn backward_layers(
    layers: &[Dense],
    traces: &[LayerTrace],
    input: &DenseMatrix,
    upstream: DenseMatrix,
    upstream_is_preactivation: bool,
    grads: &mut ParamGrads,
    want_input_grad: bool,
) -> Option<DenseMatrix> {
    let mut upstream = upstream;
    for li in (0..layers.len()).rev() {
        let layer = &layers[li];
        let t = &traces[li];
        let dz = if upstream_is_preactivation && li == layers.len() - 1 {
            upstream
        } else {
            let mut dz = upstream;
            for ((g, z), a) in dz.as_mut_slice().iter_mut().zip(t.pre.as_slice()).zip(t.act.as_slice()) {
                *g *= layer.activation.derivative(*z, *a);
            }
            dz
        };
        let a_in = if li == 0 { input } else { &traces[li - 1].act };
        let gw = dz.transposed_matmul(a_in).expect("layer shapes chain");
        let lg = &mut grads.layers[li];
        crate::linalg::axpy(1.0, gw.as_slice(), lg.weight.as_mut_slice());
        for i in 0..dz.rows() {
            crate::linalg::axpy(1.0, dz.row(i), &mut lg.bias);
        }
        if li == 0 && !want_input_grad {
            return None;
        }
        upstream = dz.matmul(&layer.weight).expect("layer shapes chain");
    }
    Some(upstream)
}
