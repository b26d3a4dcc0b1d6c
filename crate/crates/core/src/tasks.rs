//! Workloads: synthetic shared-input tasks with a controllable angle between
//! their teachers, and a convex quadratic multi-objective testbed whose
//! Pareto set is known in closed form.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, sym_eig_bounds, DenseMatrix, DenseVector, SeededRng};
use crate::model::{Batch, TaskKind};

/// Shared-input tasks whose teacher directions have a prescribed pairwise
/// cosine (`conflict`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub tasks: usize,
    pub input_dim: usize,
    pub conflict: f64,
    #[serde(default)]
    pub noise_std: f64,
    /// One entry per task; a single entry is broadcast to every task.
    pub kinds: Vec<TaskKind>,
    /// Teacher norms, one per task (default 1). For binary tasks this is the
    /// logit scale.
    #[serde(default)]
    pub scales: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn new(tasks: usize, input_dim: usize, conflict: f64, kind: TaskKind, seed: u64) -> Self {
        Self {
            tasks,
            input_dim,
            conflict,
            noise_std: 0.0,
            kinds: vec![kind; tasks],
            scales: Vec::new(),
            seed,
        }
    }

    pub fn task_kinds(&self) -> Vec<TaskKind> {
        if self.kinds.len() == 1 {
            vec![self.kinds[0]; self.tasks]
        } else {
            self.kinds.clone()
        }
    }

    fn task_scales(&self) -> Vec<f64> {
        match self.scales.len() {
            0 => vec![1.0; self.tasks],
            1 => vec![self.scales[0]; self.tasks],
            _ => self.scales.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.tasks == 0 || self.input_dim == 0 {
            return bad("synthetic tasks need tasks ≥ 1 and input_dim ≥ 1".into());
        }
        if !(self.kinds.len() == 1 || self.kinds.len() == self.tasks) {
            return bad(format!(
                "expected 1 or {} task kinds, got {}",
                self.tasks,
                self.kinds.len()
            ));
        }
        if !(self.scales.len() <= 1 || self.scales.len() == self.tasks) {
            return bad(format!(
                "expected 0, 1 or {} scales, got {}",
                self.tasks,
                self.scales.len()
            ));
        }
        if self.task_scales().iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return bad("teacher scales must be positive".into());
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return bad("noise_std must be ≥ 0".into());
        }
        let c = self.conflict;
        if !c.is_finite() || c.abs() > 1.0 {
            return bad(format!("conflict {c} outside [-1, 1]"));
        }
        if self.tasks > 1 && c < -1.0 / (self.tasks as f64 - 1.0) - 1e-12 {
            return bad(format!(
                "conflict {c} is infeasible for {} tasks: the cosine Gram matrix is not positive semidefinite below {}",
                self.tasks,
                -1.0 / (self.tasks as f64 - 1.0)
            ));
        }
        let rank = conflict_factor(self.tasks, c).cols();
        if rank > self.input_dim {
            return bad(format!(
                "conflict {c} with {} tasks needs input_dim ≥ {rank}, got {}",
                self.tasks, self.input_dim
            ));
        }
        Ok(())
    }
}

/// Factor `L` (M×r, r = rank) with `L·Lᵀ = (1 − c)I + c·11ᵀ`, computed by a
/// Cholesky sweep that drops numerically zero pivots.
fn conflict_factor(m: usize, c: f64) -> DenseMatrix {
    let gram = |i: usize, j: usize| if i == j { 1.0 } else { c };
    let mut l = DenseMatrix::zeros(m, m);
    let mut kept = Vec::new();
    for j in 0..m {
        let s: f64 = (0..j).map(|k| l.get(j, k) * l.get(j, k)).sum();
        let d = gram(j, j) - s;
        if d <= 1e-12 {
            continue;
        }
        let piv = d.sqrt();
        l.set(j, j, piv);
        for i in j + 1..m {
            let s: f64 = (0..j).map(|k| l.get(i, k) * l.get(j, k)).sum();
            l.set(i, j, (gram(i, j) - s) / piv);
        }
        kept.push(j);
    }
    let cols: Vec<Vec<f64>> = kept.iter().map(|&j| l.column(j)).collect();
    DenseMatrix::from_columns(&cols).expect("factor columns share a length")
}

/// Random orthonormal vectors in `R^d` (Gram–Schmidt on Gaussian draws).
fn orthonormal_basis(d: usize, count: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = rng.normal_vec(d);
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(x, qi)| *x -= c * qi);
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Deterministic batch stream for a [`SyntheticTaskSpec`].
#[derive(Debug, Clone)]
pub struct SyntheticTasks {
    spec: SyntheticTaskSpec,
    teachers: Vec<Vec<f64>>,
    kinds: Vec<TaskKind>,
    rng: SeededRng,
}

impl SyntheticTasks {
    pub fn new(spec: &SyntheticTaskSpec) -> Result<Self> {
        Self::with_stream(spec, 1)
    }

    /// Same teachers as [`SyntheticTasks::new`], with inputs and labels drawn
    /// from an independent random stream (`stream` 0 is reserved).
    pub fn with_stream(spec: &SyntheticTaskSpec, stream: u64) -> Result<Self> {
        if stream == 0 {
            return Err(Error::InvalidArgument("stream 0 is used for the teachers".into()));
        }
        spec.validate()?;
        let root = SeededRng::new(spec.seed);
        let mut teacher_rng = root.fork(0);
        let factor = conflict_factor(spec.tasks, spec.conflict);
        let basis = orthonormal_basis(spec.input_dim, factor.cols(), &mut teacher_rng);
        let teachers = spec
            .task_scales()
            .iter()
            .enumerate()
            .map(|(m, scale)| {
                let mut t = vec![0.0; spec.input_dim];
                for (k, q) in basis.iter().enumerate() {
                    crate::linalg::axpy(scale * factor.get(m, k), q, &mut t);
                }
                t
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            teachers,
            kinds: spec.task_kinds(),
            rng: root.fork(stream),
        })
    }

    pub fn teachers(&self) -> &[Vec<f64>] {
        &self.teachers
    }

    pub fn task_kinds(&self) -> &[TaskKind] {
        &self.kinds
    }

    /// Draws one batch: `x ~ N(0, I)`, then per task a teacher response plus
    /// Gaussian noise (regression) or a Bernoulli draw on its sigmoid (binary).
    pub fn next_batch(&mut self, batch_size: usize) -> Result<Batch> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be ≥ 1".into()));
        }
        let d = self.spec.input_dim;
        let inputs = DenseMatrix::from_row_major(batch_size, d, self.rng.normal_vec(batch_size * d))?;
        let mut labels = vec![Vec::with_capacity(batch_size); self.teachers.len()];
        for i in 0..batch_size {
            let x = inputs.row(i);
            for (m, t) in self.teachers.iter().enumerate() {
                let mut z = dot(t, x);
                if self.spec.noise_std > 0.0 {
                    z += self.spec.noise_std * self.rng.normal();
                }
                let y = match self.kinds[m] {
                    TaskKind::Regression => z,
                    TaskKind::Binary => {
                        let p = 1.0 / (1.0 + (-z).exp());
                        if self.rng.uniform() < p {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
                labels[m].push(y);
            }
        }
        Batch::new(inputs, labels)
    }
}

pub fn generate_batches(spec: &SyntheticTaskSpec, batch_size: usize, count: usize) -> Result<Vec<Batch>> {
    let mut gen = SyntheticTasks::new(spec)?;
    (0..count).map(|_| gen.next_batch(batch_size)).collect()
}

/// `f_i(θ) = ½(θ − c_i)ᵀ A_i (θ − c_i)` for each task.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticMOOSpec {
    centers: Vec<DenseVector>,
    curvatures: Vec<DenseMatrix>,
}

impl QuadraticMOOSpec {
    pub fn new(centers: Vec<DenseVector>, curvatures: Vec<DenseMatrix>) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::InvalidArgument(
                "quadratic testbed needs at least one task".into(),
            ));
        }
        if curvatures.len() != centers.len() {
            return Err(Error::dims(
                "QuadraticMOOSpec (curvatures)",
                centers.len(),
                curvatures.len(),
            ));
        }
        let d = centers[0].dim();
        for (c, a) in centers.iter().zip(&curvatures) {
            if c.dim() != d {
                return Err(Error::dims("QuadraticMOOSpec (center)", d, c.dim()));
            }
            if a.rows() != d || a.cols() != d {
                return Err(Error::dims("QuadraticMOOSpec (curvature)", d, a.rows()));
            }
            if !c.is_finite() {
                return Err(Error::NonFinite("QuadraticMOOSpec"));
            }
            let (mu, _) = sym_eig_bounds(a)?;
            if mu <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "curvature matrices must be positive definite (smallest eigenvalue {mu:e})"
                )));
            }
        }
        Ok(Self { centers, curvatures })
    }

    /// Identity curvature for every task.
    pub fn isotropic(centers: Vec<DenseVector>) -> Result<Self> {
        let d = centers.first().map_or(0, DenseVector::dim);
        let curvatures = vec![DenseMatrix::identity(d); centers.len()];
        Self::new(centers, curvatures)
    }

    pub fn dim(&self) -> usize {
        self.centers[0].dim()
    }

    pub fn task_count(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[DenseVector] {
        &self.centers
    }

    pub fn curvatures(&self) -> &[DenseMatrix] {
        &self.curvatures
    }

    fn offsets(&self, theta: &DenseVector) -> Result<Vec<Vec<f64>>> {
        if theta.dim() != self.dim() {
            return Err(Error::dims("quadratic testbed", self.dim(), theta.dim()));
        }
        Ok(self
            .centers
            .iter()
            .map(|c| theta.as_slice().iter().zip(c.as_slice()).map(|(t, c)| t - c).collect())
            .collect())
    }

    pub fn losses(&self, theta: &DenseVector) -> Result<Vec<f64>> {
        let offsets = self.offsets(theta)?;
        Ok(offsets
            .iter()
            .zip(&self.curvatures)
            .map(|(r, a)| 0.5 * dot(r, &a.transposed_matvec(r).expect("square")))
            .collect())
    }

    /// Exact per-task gradients `A_i(θ − c_i)` as columns (d×M).
    pub fn quadratic_grads(&self, theta: &DenseVector) -> Result<DenseMatrix> {
        let offsets = self.offsets(theta)?;
        let cols: Vec<Vec<f64>> = offsets
            .iter()
            .zip(&self.curvatures)
            .map(|(r, a)| (0..a.rows()).map(|i| dot(a.row(i), r)).collect())
            .collect();
        DenseMatrix::from_columns(&cols)
    }
}

pub fn quadratic_grads(spec: &QuadraticMOOSpec, theta: &DenseVector) -> Result<DenseMatrix> {
    spec.quadratic_grads(theta)
}

/// Writes batches in the columnar text format:
///
/// ```text
/// # multibalance-batches/1
/// batch <rows> <input_dim> <tasks>
/// x0 x1 … y0 y1 …        (one line per row, space separated)
/// ```
pub fn write_batches(batches: &[Batch], out: &mut impl Write) -> Result<()> {
    writeln!(out, "# multibalance-batches/1")?;
    for b in batches {
        writeln!(out, "batch {} {} {}", b.len(), b.inputs().cols(), b.task_count())?;
        for i in 0..b.len() {
            let mut fields: Vec<String> = b.inputs().row(i).iter().map(|x| x.to_string()).collect();
            fields.extend(b.labels().iter().map(|l| l[i].to_string()));
            writeln!(out, "{}", fields.join(" "))?;
        }
    }
    Ok(())
}

pub fn read_batches(input: impl Read) -> Result<Vec<Batch>> {
    let mut lines = BufReader::new(input).lines().enumerate();
    let mut batches = Vec::new();
    let parse_err = |n: usize, msg: &str| Error::Parse(format!("line {}: {msg}", n + 1));
    while let Some((n, line)) = lines.next() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let head: Vec<usize> = t
            .strip_prefix("batch ")
            .ok_or_else(|| parse_err(n, "expected a `batch` header"))?
            .split_whitespace()
            .map(|x| x.parse().map_err(|_| parse_err(n, "bad batch header")))
            .collect::<Result<_>>()?;
        let [rows, d, tasks] = head[..] else {
            return Err(parse_err(n, "batch header needs rows, input_dim, tasks"));
        };
        let mut inputs = Vec::with_capacity(rows * d);
        let mut labels = vec![Vec::with_capacity(rows); tasks];
        for _ in 0..rows {
            let (n, line) = lines.next().ok_or_else(|| Error::Parse("truncated batch".into()))?;
            let vals: Vec<f64> = line?
                .split_whitespace()
                .map(|x| x.parse().map_err(|_| parse_err(n, "bad number")))
                .collect::<Result<_>>()?;
            if vals.len() != d + tasks {
                return Err(parse_err(
                    n,
                    &format!("expected {} values, found {}", d + tasks, vals.len()),
                ));
            }
            inputs.extend_from_slice(&vals[..d]);
            for (m, y) in vals[d..].iter().enumerate() {
                labels[m].push(*y);
            }
        }
        batches.push(Batch::new(DenseMatrix::from_row_major(rows, d, inputs)?, labels)?);
    }
    Ok(batches)
}
