//! Dense row-major linear algebra, seeded randomness and the two spectral
//! utilities the rest of the crate leans on.
//!
//! Everything here is `f64`. Matrices are small (task counts in the tens,
//! layer widths in the hundreds), so plain loops beat any dependency.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense vector of `f64`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVector {
    data: Vec<f64>,
}

impl DenseVector {
    pub fn new(data: Vec<f64>) -> Self {
        Self { data }
    }

    /// Like [`DenseVector::new`] but rejects NaN/Inf entries.
    pub fn try_new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("DenseVector::try_new"));
        }
        Ok(Self { data })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { data: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn dot(&self, other: &DenseVector) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn scale(&self, c: f64) -> DenseVector {
        DenseVector::new(self.data.iter().map(|x| c * x).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(data: Vec<f64>) -> Self {
        Self::new(data)
    }
}

impl std::ops::Index<usize> for DenseVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

/// Dense row-major matrix of `f64`.
///
/// Gradient matrices use one column per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims("DenseMatrix::from_row_major", rows * cols, data.len()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("DenseMatrix::from_row_major"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dims("DenseMatrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::from_row_major(rows.len(), cols, data)
    }

    /// Builds a matrix whose `j`-th column is `columns[j]`.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        let cols = columns.len();
        let mut m = Self::zeros(rows, cols);
        for (j, c) in columns.iter().enumerate() {
            if c.len() != rows {
                return Err(Error::dims("DenseMatrix::from_columns", rows, c.len()));
            }
            for (i, v) in c.iter().enumerate() {
                m.data[i * cols + j] = *v;
            }
        }
        if m.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("DenseMatrix::from_columns"));
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.rows);
        for (i, v) in values.iter().enumerate() {
            self.set(i, j, *v);
        }
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.cols).map(|j| self.column(j)).collect()
    }

    pub fn column_norms(&self) -> Vec<f64> {
        let mut sq = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (j, s) in sq.iter_mut().enumerate() {
                let v = self.get(i, j);
                *s += v * v;
            }
        }
        sq.into_iter().map(f64::sqrt).collect()
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn scale(&self, c: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| c * x).collect(),
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::dims("DenseMatrix::matmul", self.cols, other.rows));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, the dense-layer forward product when `other` is an
    /// `out × in` weight matrix.
    pub fn matmul_transposed(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.cols {
            return Err(Error::dims("DenseMatrix::matmul_transposed", self.cols, other.cols));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`, used for weight gradients.
    pub fn transposed_matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows {
            return Err(Error::dims("DenseMatrix::transposed_matmul", self.rows, other.rows));
        }
        let mut out = DenseMatrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for (i, ai) in a.iter().enumerate() {
                if *ai == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, bj) in out_row.iter_mut().zip(b) {
                    *o += ai * bj;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · v`.
    pub fn transposed_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.rows != v.len() {
            return Err(Error::dims("DenseMatrix::transposed_matvec", self.rows, v.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (i, vi) in v.iter().enumerate() {
            if *vi == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += vi * a;
            }
        }
        Ok(out)
    }

    /// Gram matrix `selfᵀ · self`.
    pub fn gram(&self) -> DenseMatrix {
        self.transposed_matmul(self).expect("square by construction")
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += a · x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Standard matrix-vector product.
pub fn matvec(m: &DenseMatrix, v: &DenseVector) -> Result<DenseVector> {
    if m.cols != v.dim() {
        return Err(Error::dims("matvec", m.cols, v.dim()));
    }
    let out = (0..m.rows).map(|i| dot(m.row(i), v.as_slice())).collect();
    Ok(DenseVector::new(out))
}

/// Solves the square system `a·x = b` by Gaussian elimination with partial
/// pivoting. Returns `None` when a pivot falls below `rel_tol` times the
/// largest entry of `a`.
pub fn solve_linear(a: &DenseMatrix, b: &[f64], rel_tol: f64) -> Option<Vec<f64>> {
    let n = a.rows;
    if a.cols != n || b.len() != n {
        return None;
    }
    let scale = a.data.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return None;
    }
    let mut m = a.data.clone();
    let mut x = b.to_vec();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| m[i * n + k].abs().total_cmp(&m[j * n + k].abs()))?;
        if m[p * n + k].abs() <= rel_tol * scale {
            return None;
        }
        if p != k {
            for c in 0..n {
                m.swap(k * n + c, p * n + c);
            }
            x.swap(k, p);
        }
        for i in k + 1..n {
            let f = m[i * n + k] / m[k * n + k];
            if f != 0.0 {
                for c in k..n {
                    m[i * n + c] -= f * m[k * n + c];
                }
                x[i] -= f * x[k];
            }
        }
    }
    for k in (0..n).rev() {
        let tail: f64 = (k + 1..n).map(|c| m[k * n + c] * x[c]).sum();
        x[k] = (x[k] - tail) / m[k * n + k];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Deterministic, platform-independent random stream (ChaCha8).
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream derived from this seed and a label. Does not
    /// advance `self`.
    pub fn fork(&self, stream: u64) -> SeededRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream.wrapping_add(1));
        let seed = rng.next_u64();
        SeededRng::new(seed)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}

// Fixed seed for the start vector of every power iteration.
const POWER_START_SEED: u64 = 0x005e_ed0f_9011;

fn power_start(n: usize) -> Vec<f64> {
    let mut rng = SeededRng::new(POWER_START_SEED);
    let mut v: Vec<f64> = (0..n).map(|_| 1.0 + 0.5 * rng.normal()).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    v
}

/// Largest eigenvalue of a symmetric positive semidefinite operator by
/// power iteration. Stops when the eigen-residual `‖Av − θv‖` falls below
/// `tol · θ`.
fn psd_power_iteration(
    n: usize,
    apply: impl Fn(&[f64]) -> Vec<f64>,
    tol: f64,
    max_iter: usize,
    routine: &'static str,
) -> Result<f64> {
    let mut v = power_start(n);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let w = apply(&v);
        let theta = dot(&v, &w);
        let wn = norm(&w);
        if wn == 0.0 {
            return Ok(0.0);
        }
        residual = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - theta * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual <= tol * theta.abs() {
            return Ok(theta);
        }
        v = w.into_iter().map(|x| x / wn).collect();
    }
    Err(Error::NonConvergence {
        routine,
        iterations: max_iter,
        residual,
        last: v,
    })
}

/// Largest singular value of `m`, by power iteration on `mᵀm` from a fixed
/// start vector. `tol` bounds the relative eigen-residual of `mᵀm`.
pub fn spectral_norm(m: &DenseMatrix, tol: f64, max_iter: usize) -> Result<f64> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::InvalidArgument("spectral_norm of an empty matrix".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    let apply = |v: &[f64]| {
        let mv: Vec<f64> = (0..m.rows).map(|i| dot(m.row(i), v)).collect();
        m.transposed_matvec(&mv).expect("shapes checked")
    };
    let top = psd_power_iteration(m.cols, apply, tol, max_iter, "spectral_norm")?;
    Ok(top.max(0.0).sqrt())
}

const SYMMETRY_TOL: f64 = 1e-10;
const EIG_TOL: f64 = 1e-13;
const EIG_MAX_ITER: usize = 200_000;

/// Square roots of the extreme eigenvalues of a symmetric PSD matrix, i.e.
/// `(μ, ℓ)` with `μ²I ⪯ m ⪯ ℓ²I`. Pass `BᵀB` to get the extreme singular
/// values of `B`. The smallest eigenvalue comes from power iteration on the
/// shifted matrix `ℓ²I − m`.
pub fn sym_eig_bounds(m: &DenseMatrix) -> Result<(f64, f64)> {
    if m.rows != m.cols {
        return Err(Error::dims("sym_eig_bounds", m.rows, m.cols));
    }
    if m.rows == 0 {
        return Err(Error::InvalidArgument("sym_eig_bounds of an empty matrix".into()));
    }
    let n = m.rows;
    let asym = (0..n)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .map(|(i, j)| (m.get(i, j) - m.get(j, i)).abs())
        .fold(0.0, f64::max);
    if asym > SYMMETRY_TOL {
        return Err(Error::Asymmetric(asym));
    }
    let apply = |v: &[f64]| (0..n).map(|i| dot(m.row(i), v)).collect::<Vec<f64>>();
    let top = psd_power_iteration(n, apply, EIG_TOL, EIG_MAX_ITER, "sym_eig_bounds")?;
    let shifted = |v: &[f64]| (0..n).map(|i| top * v[i] - dot(m.row(i), v)).collect::<Vec<f64>>();
    let spread = psd_power_iteration(n, shifted, EIG_TOL, EIG_MAX_ITER, "sym_eig_bounds")?;
    let bottom = (top - spread).max(0.0);
    Ok((bottom.sqrt(), top.max(0.0).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matvec_examples() {
        let v = DenseVector::new(vec![1.0, 2.0, 3.0]);
        assert_eq!(matvec(&DenseMatrix::identity(3), &v).unwrap(), v);
        let z = matvec(&DenseMatrix::zeros(2, 2), &DenseVector::new(vec![5.0, 7.0])).unwrap();
        assert_eq!(z.as_slice(), &[0.0, 0.0]);
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let out = matvec(&m, &DenseVector::new(vec![1.0, 1.0])).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matvec_rejects_mismatch() {
        let err = matvec(&DenseMatrix::identity(3), &DenseVector::zeros(2)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn from_row_major_rejects_bad_input() {
        assert!(DenseMatrix::from_row_major(2, 2, vec![1.0; 3]).is_err());
        assert!(DenseMatrix::from_row_major(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn spectral_norm_examples() {
        assert_relative_eq!(spectral_norm(&DenseMatrix::identity(4), 1e-12, 1000).unwrap(), 1.0);
        let d = DenseMatrix::diag(&[3.0, 1.0]);
        assert_relative_eq!(spectral_norm(&d, 1e-12, 10_000).unwrap(), 3.0, max_relative = 1e-10);
        // Nilpotent [[0,2],[0,0]]: MᵀM = diag(0,4), singular values (2,0).
        let n = DenseMatrix::from_rows(&[vec![0.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let oracle = two_by_two_singular_values(&n).0;
        assert_relative_eq!(oracle, 2.0, max_relative = 1e-14);
        assert_relative_eq!(spectral_norm(&n, 1e-12, 10_000).unwrap(), oracle, max_relative = 1e-10);
    }

    #[test]
    fn spectral_norm_of_zero_matrix_is_zero() {
        assert_eq!(spectral_norm(&DenseMatrix::zeros(3, 2), 1e-8, 10).unwrap(), 0.0);
    }

    #[test]
    fn spectral_norm_rejects_bad_arguments() {
        assert!(spectral_norm(&DenseMatrix::zeros(0, 0), 1e-8, 10).is_err());
        assert!(spectral_norm(&DenseMatrix::identity(2), 0.0, 10).is_err());
    }

    #[test]
    fn spectral_norm_reports_non_convergence() {
        // Two nearly equal singular values make power iteration slow.
        let m = DenseMatrix::diag(&[1.0, 0.999_999, 0.5]);
        match spectral_norm(&m, 1e-15, 3) {
            Err(Error::NonConvergence { last, iterations, .. }) => {
                assert_eq!(iterations, 3);
                assert_eq!(last.len(), 3);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    /// Singular values of a 2×2 matrix from the characteristic polynomial of
    /// MᵀM: s² = (t ± sqrt(t² − 4d)) / 2 with t = trace, d = det.
    fn two_by_two_singular_values(m: &DenseMatrix) -> (f64, f64) {
        let g = m.gram();
        let t = g.get(0, 0) + g.get(1, 1);
        let d = g.get(0, 0) * g.get(1, 1) - g.get(0, 1) * g.get(1, 0);
        let disc = (t * t - 4.0 * d).max(0.0).sqrt();
        (((t + disc) / 2.0).sqrt(), ((t - disc) / 2.0).max(0.0).sqrt())
    }

    #[test]
    fn sym_eig_bounds_examples() {
        let (mu, ell) = sym_eig_bounds(&DenseMatrix::identity(2)).unwrap();
        assert_relative_eq!(mu, 1.0, epsilon = 1e-12);
        assert_relative_eq!(ell, 1.0, epsilon = 1e-12);

        let (mu, ell) = sym_eig_bounds(&DenseMatrix::diag(&[4.0, 9.0])).unwrap();
        assert_relative_eq!(mu, 2.0, epsilon = 1e-10);
        assert_relative_eq!(ell, 3.0, epsilon = 1e-10);

        let b = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let (s_max, s_min) = two_by_two_singular_values(&b);
        // Golden-ratio pair.
        assert_relative_eq!(s_max, (1.0 + 5f64.sqrt()) / 2.0, epsilon = 1e-12);
        assert_relative_eq!(s_min, (5f64.sqrt() - 1.0) / 2.0, epsilon = 1e-12);
        let (mu, ell) = sym_eig_bounds(&b.gram()).unwrap();
        assert_relative_eq!(mu, s_min, epsilon = 1e-9);
        assert_relative_eq!(ell, s_max, epsilon = 1e-9);
    }

    #[test]
    fn sym_eig_bounds_rejects_asymmetric() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig_bounds(&m), Err(Error::Asymmetric(_))));
    }

    #[test]
    fn seeded_rng_is_reproducible() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        let xs: Vec<u64> = (0..64).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..64).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        let na: Vec<u64> = (0..16).map(|_| a.normal().to_bits()).collect();
        let nb: Vec<u64> = (0..16).map(|_| b.normal().to_bits()).collect();
        assert_eq!(na, nb);
        assert_ne!(SeededRng::new(1).next_u64(), SeededRng::new(2).next_u64());
    }

    #[test]
    fn forks_are_independent_and_stable() {
        let root = SeededRng::new(9);
        let mut f1 = root.fork(1);
        let mut f1b = root.fork(1);
        let mut f2 = root.fork(2);
        let a = f1.next_u64();
        assert_eq!(a, f1b.next_u64());
        assert_ne!(a, f2.next_u64());
    }

    #[test]
    fn products_agree_with_each_other() {
        let mut rng = SeededRng::new(3);
        let a = DenseMatrix::from_row_major(3, 4, rng.normal_vec(12)).unwrap();
        let b = DenseMatrix::from_row_major(5, 4, rng.normal_vec(20)).unwrap();
        let via_t = a.matmul(&b.transpose()).unwrap();
        let direct = a.matmul_transposed(&b).unwrap();
        assert!(via_t.max_abs_diff(&direct) < 1e-12);
        let c = DenseMatrix::from_row_major(3, 2, rng.normal_vec(6)).unwrap();
        let tm = a.transposed_matmul(&c).unwrap();
        assert!(tm.max_abs_diff(&a.transpose().matmul(&c).unwrap()) < 1e-12);
    }

    #[test]
    fn solve_linear_recovers_known_solution() {
        let a = DenseMatrix::from_rows(&[vec![0.0, 2.0, 1.0], vec![1.0, 1.0, 0.0], vec![3.0, 0.0, 1.0]]).unwrap();
        let x = [1.0, -2.0, 0.5];
        let b: Vec<f64> = (0..3).map(|i| dot(a.row(i), &x)).collect();
        let got = solve_linear(&a, &b, 1e-14).unwrap();
        for (g, e) in got.iter().zip(x) {
            assert!((g - e).abs() < 1e-12);
        }
        let singular = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(solve_linear(&singular, &[1.0, 2.0], 1e-12).is_none());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn matrix(max: usize) -> impl Strategy<Value = DenseMatrix> {
            (1..=max, 1..=max).prop_flat_map(|(r, c)| {
                prop::collection::vec(-10.0..10.0f64, r * c)
                    .prop_map(move |d| DenseMatrix::from_row_major(r, c, d).unwrap())
            })
        }

        proptest! {
            #[test]
            fn matvec_is_linear(
                m in matrix(6),
                a in -5.0..5.0f64,
                b in -5.0..5.0f64,
                seed in any::<u64>(),
            ) {
                let mut rng = SeededRng::new(seed);
                let u = DenseVector::new(rng.normal_vec(m.cols()));
                let v = DenseVector::new(rng.normal_vec(m.cols()));
                let combo: Vec<f64> = u.as_slice().iter().zip(v.as_slice())
                    .map(|(x, y)| a * x + b * y).collect();
                let lhs = matvec(&m, &DenseVector::new(combo)).unwrap();
                let mu = matvec(&m, &u).unwrap();
                let mv = matvec(&m, &v).unwrap();
                for i in 0..m.rows() {
                    let rhs = a * mu[i] + b * mv[i];
                    let scale = 1.0 + (a * mu[i]).abs() + (b * mv[i]).abs();
                    prop_assert!((lhs[i] - rhs).abs() <= 1e-12 * scale);
                }
            }

            #[test]
            fn spectral_norm_is_transpose_invariant(m in matrix(16)) {
                let s = spectral_norm(&m, 1e-12, 1_000_000).unwrap();
                let t = spectral_norm(&m.transpose(), 1e-12, 1_000_000).unwrap();
                prop_assert!((s - t).abs() <= 1e-8 * s.max(1e-300));
            }
        }
    }
}
