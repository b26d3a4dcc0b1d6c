//! Probability-simplex machinery: Euclidean projection, min-norm points of
//! the convex hull of task gradients, and the projected descent step on
//! task weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, solve_linear, DenseMatrix, DenseVector};

/// Sum-to-one slack accepted by [`SimplexWeights::new`].
pub const SIMPLEX_SUM_TOL: f64 = 1e-9;

pub const DEFAULT_MIN_NORM_TOL: f64 = 1e-8;
pub const DEFAULT_MIN_NORM_MAX_ITER: usize = 500;

/// Task weights on the probability simplex: non-negative, summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexWeights {
    weights: Vec<f64>,
}

impl SimplexWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("simplex weights must be non-empty".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "simplex weight {w} is negative or non-finite"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(Error::InvalidArgument(format!("simplex weights sum to {sum}, not 1")));
        }
        Ok(Self { weights })
    }

    pub fn uniform(m: usize) -> Self {
        assert!(m > 0, "uniform simplex weights need at least one task");
        Self {
            weights: vec![1.0 / m as f64; m],
        }
    }

    /// The vertex `e_i` of the `m`-simplex.
    pub fn vertex(m: usize, i: usize) -> Self {
        let mut weights = vec![0.0; m];
        weights[i] = 1.0;
        Self { weights }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.weights
    }
}

impl TryFrom<Vec<f64>> for SimplexWeights {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        SimplexWeights::new(v)
    }
}

impl From<SimplexWeights> for Vec<f64> {
    fn from(w: SimplexWeights) -> Vec<f64> {
        w.weights
    }
}

/// A min-norm point of the convex hull of the columns of a gradient matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MinNormResult {
    pub weights: SimplexWeights,
    pub direction: DenseVector,
    pub norm: f64,
    pub iterations: usize,
}

impl MinNormResult {
    fn from_weights(v: &DenseMatrix, weights: SimplexWeights, iterations: usize) -> Self {
        let direction = combine_columns(v, weights.as_slice());
        let norm = direction.norm();
        Self {
            weights,
            direction,
            norm,
            iterations,
        }
    }
}

/// `V · w` for a column-per-task matrix.
pub fn combine_columns(v: &DenseMatrix, w: &[f64]) -> DenseVector {
    debug_assert_eq!(v.cols(), w.len());
    let out = (0..v.rows()).map(|i| dot(v.row(i), w)).collect();
    DenseVector::new(out)
}

/// Euclidean projection onto the probability simplex (sort and threshold).
pub fn project_simplex(v: &DenseVector) -> Result<SimplexWeights> {
    let x = v.as_slice();
    if x.is_empty() {
        return Err(Error::InvalidArgument("cannot project a 0-dimensional vector".into()));
    }
    if x.iter().any(|xi| !xi.is_finite()) {
        return Err(Error::NonFinite("project_simplex"));
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            tau = candidate;
        }
    }
    let mut weights: Vec<f64> = x.iter().map(|xi| (xi - tau).max(0.0)).collect();
    // Re-normalise the rounding residue so the sum invariant is tight.
    let sum: f64 = weights.iter().sum();
    if sum > 0.0 && (sum - 1.0).abs() > 1e-15 {
        weights.iter_mut().for_each(|w| *w /= sum);
    }
    SimplexWeights::new(weights)
}

fn check_solver_args(v: &DenseMatrix, tol: f64) -> Result<()> {
    if v.cols() == 0 {
        return Err(Error::InvalidArgument("gradient matrix has no columns".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    if !v.is_finite() {
        return Err(Error::NonFinite("min_norm_weights"));
    }
    Ok(())
}

/// Minimum-norm point of `conv{v_1, …, v_M}`.
///
/// `M = 1` is trivial and `M = 2` uses the closed-form segment solution
/// (identical columns give `(½, ½)`). Larger `M` runs Frank–Wolfe with away
/// steps and exact line search on `λ ↦ ‖Vλ‖²`, starting from uniform
/// weights, until the duality gap drops to `tol`. Ties in the
/// linear-minimisation step go to the smallest column index.
pub fn min_norm_weights(v: &DenseMatrix, tol: f64, max_iter: usize) -> Result<MinNormResult> {
    check_solver_args(v, tol)?;
    let m = v.cols();
    match m {
        1 => Ok(MinNormResult::from_weights(v, SimplexWeights::vertex(1, 0), 0)),
        2 => {
            let g = v.gram();
            let (g11, g12, g22) = (g.get(0, 0), g.get(0, 1), g.get(1, 1));
            let denom = g11 - 2.0 * g12 + g22;
            let t = if denom <= f64::EPSILON * (g11 + g22).max(f64::MIN_POSITIVE) {
                0.5
            } else {
                ((g22 - g12) / denom).clamp(0.0, 1.0)
            };
            let weights = SimplexWeights::new(vec![t, 1.0 - t])?;
            Ok(MinNormResult::from_weights(v, weights, 1))
        }
        _ => frank_wolfe(v, tol, max_iter),
    }
}

fn frank_wolfe(v: &DenseMatrix, tol: f64, max_iter: usize) -> Result<MinNormResult> {
    let m = v.cols();
    let g = v.gram();
    let mut lambda = vec![1.0 / m as f64; m];
    let gram_times = |x: &[f64]| -> Vec<f64> { (0..m).map(|i| dot(g.row(i), x)).collect() };
    let mut gap = f64::INFINITY;

    for it in 0..max_iter {
        let gl = gram_times(&lambda);
        let quad = dot(&lambda, &gl);
        // ∇‖Vλ‖² = 2Gλ
        let grad: Vec<f64> = gl.iter().map(|x| 2.0 * x).collect();
        let grad_dot_lambda = 2.0 * quad;

        let mut s = 0;
        for i in 1..m {
            if grad[i] < grad[s] {
                s = i;
            }
        }
        let mut a: Option<usize> = None;
        for i in 0..m {
            if lambda[i] > 0.0 && a.is_none_or(|j| grad[i] > grad[j]) {
                a = Some(i);
            }
        }
        let a = a.expect("simplex point has a positive entry");

        gap = grad_dot_lambda - grad[s];
        if gap <= tol {
            let weights = SimplexWeights::new(lambda)?;
            return Ok(MinNormResult::from_weights(v, weights, it));
        }
        let away_gap = grad[a] - grad_dot_lambda;

        let away = gap < away_gap && lambda[a] < 1.0;
        let (dir, max_step) = if away {
            let mut d = lambda.clone();
            d[a] -= 1.0;
            (d, lambda[a] / (1.0 - lambda[a]))
        } else {
            let mut d: Vec<f64> = lambda.iter().map(|x| -x).collect();
            d[s] += 1.0;
            (d, 1.0)
        };

        // Exact line search on the quadratic along `dir`.
        let gd = gram_times(&dir);
        let curvature = dot(&dir, &gd);
        let slope = dot(&lambda, &gd);
        let step = if curvature <= 0.0 {
            max_step
        } else {
            (-slope / curvature).clamp(0.0, max_step)
        };
        if step == 0.0 {
            // No progress possible along the chosen direction.
            let weights = SimplexWeights::new(lambda)?;
            return Ok(MinNormResult::from_weights(v, weights, it));
        }
        for (l, d) in lambda.iter_mut().zip(&dir) {
            *l += step * d;
        }
        if away && step == max_step {
            // Drop step: the away vertex leaves the active set.
            lambda[a] = 0.0;
        }
        clean_simplex(&mut lambda);
        polish_on_support(&g, &mut lambda);
    }
    Err(Error::NonConvergence {
        routine: "min_norm_weights",
        iterations: max_iter,
        residual: gap,
        last: lambda,
    })
}

/// Moves towards the minimizer over the affine hull of the current support
/// (a Wolfe-style minor cycle). When that point leaves the simplex the walk
/// stops at the boundary, the vanishing vertex is dropped and the smaller
/// face is tried. The objective never increases along the walk. Away steps
/// find the right face quickly but can crawl inside it when `G` is badly
/// conditioned; this finishes the job exactly.
fn polish_on_support(g: &DenseMatrix, lambda: &mut [f64]) {
    let quad = |w: &[f64]| -> f64 { (0..w.len()).map(|i| w[i] * dot(g.row(i), w)).sum() };
    let start = quad(lambda);
    let mut current = lambda.to_vec();
    loop {
        let support: Vec<usize> = (0..current.len()).filter(|&i| current[i] > 0.0).collect();
        let k = support.len();
        if k < 2 {
            break;
        }
        // Ridge keeps the KKT system solvable on rank-deficient faces.
        let ridge = 1e-13 * support.iter().map(|&i| g.get(i, i)).fold(0.0, f64::max);
        // [G_SS + ridge·I  1; 1ᵀ 0] [x; μ] = [0; 1]
        let mut kkt = DenseMatrix::zeros(k + 1, k + 1);
        for (r, &i) in support.iter().enumerate() {
            for (c, &j) in support.iter().enumerate() {
                kkt.set(r, c, g.get(i, j));
            }
            kkt.set(r, r, kkt.get(r, r) + ridge);
            kkt.set(r, k, 1.0);
            kkt.set(k, r, 1.0);
        }
        let mut rhs = vec![0.0; k + 1];
        rhs[k] = 1.0;
        let Some(x) = solve_linear(&kkt, &rhs, 1e-15) else {
            break;
        };
        let mut target = vec![0.0; current.len()];
        for (r, &i) in support.iter().enumerate() {
            target[i] = x[r];
        }
        if target.iter().all(|&t| t >= 0.0) {
            current = target;
            break;
        }
        // Walk towards `target` until the first coordinate hits zero.
        let (mut t_max, mut hit) = (1.0, support[0]);
        for &i in &support {
            if target[i] < 0.0 {
                let t = current[i] / (current[i] - target[i]);
                if t < t_max {
                    t_max = t;
                    hit = i;
                }
            }
        }
        for i in 0..current.len() {
            current[i] += t_max * (target[i] - current[i]);
        }
        current[hit] = 0.0;
        clean_simplex(&mut current);
    }
    clean_simplex(&mut current);
    if quad(&current) <= start {
        lambda.copy_from_slice(&current);
    }
}

fn clean_simplex(lambda: &mut [f64]) {
    for l in lambda.iter_mut() {
        if *l < 0.0 {
            *l = 0.0;
        }
    }
    let s: f64 = lambda.iter().sum();
    lambda.iter_mut().for_each(|l| *l /= s);
}

/// How the descent direction for the task weights is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StepMode {
    /// `Vᵀ(Vλ + ρVλ₀)`
    InnerProduct,
    /// Entry `m` is `cos(v_m, Vλ + ρVλ₀)`; zero-norm vectors contribute 0.
    #[default]
    Cosine,
}

/// One projected descent step on the task weights:
/// `λ' = Π(λ − β · dir)` with `dir` formed per [`StepMode`] against the
/// target `Vλ + ρVλ₀`.
pub fn regularized_weight_step(
    lambda: &SimplexWeights,
    v: &DenseMatrix,
    lambda0: &SimplexWeights,
    rho: f64,
    beta: f64,
    mode: StepMode,
) -> Result<SimplexWeights> {
    let m = v.cols();
    if lambda.dim() != m {
        return Err(Error::dims("regularized_weight_step (lambda)", m, lambda.dim()));
    }
    if lambda0.dim() != m {
        return Err(Error::dims("regularized_weight_step (lambda0)", m, lambda0.dim()));
    }
    if !(rho >= 0.0) || !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rho and beta must be non-negative (rho = {rho}, beta = {beta})"
        )));
    }
    let mixed: Vec<f64> = lambda
        .as_slice()
        .iter()
        .zip(lambda0.as_slice())
        .map(|(l, l0)| l + rho * l0)
        .collect();
    let target = combine_columns(v, &mixed);
    let mut dir = v
        .transposed_matvec(target.as_slice())
        .expect("target has V's row count");
    if mode == StepMode::Cosine {
        let target_norm = target.norm();
        for (d, col_norm) in dir.iter_mut().zip(v.column_norms()) {
            let denom = col_norm * target_norm;
            *d = if denom > 0.0 { *d / denom } else { 0.0 };
        }
    }
    let stepped: Vec<f64> = lambda.as_slice().iter().zip(&dir).map(|(l, d)| l - beta * d).collect();
    project_simplex(&DenseVector::new(stepped))
}

pub const BRUTE_FORCE_MAX_TASKS: usize = 4;

/// Exact minimum of `‖Vλ‖²` over the grid `{λ ∈ Δ^M : λ_i ∈ resolution·ℤ}`.
///
/// Grid lines along the last two coordinates are scanned in closed form:
/// on each line the objective is a convex quadratic in the integer step,
/// so its grid minimum sits at the floor or ceiling of the continuous
/// minimiser (or at an end point). `iterations` reports the number of grid
/// lines visited.
pub fn brute_force_min_norm(v: &DenseMatrix, resolution: f64) -> Result<MinNormResult> {
    let m = v.cols();
    if m == 0 {
        return Err(Error::InvalidArgument("gradient matrix has no columns".into()));
    }
    if m > BRUTE_FORCE_MAX_TASKS {
        return Err(Error::InvalidArgument(format!(
            "brute force supports at most {BRUTE_FORCE_MAX_TASKS} tasks, got {m}"
        )));
    }
    if !(resolution > 0.0 && resolution <= 0.1) {
        return Err(Error::InvalidArgument(format!(
            "resolution must lie in (0, 0.1], got {resolution}"
        )));
    }
    if m == 1 {
        return Ok(MinNormResult::from_weights(v, SimplexWeights::vertex(1, 0), 0));
    }
    let n = (1.0 / resolution).round() as usize;
    let inv_n = 1.0 / n as f64;
    let cols = v.columns();
    let last = &cols[m - 1];
    let second = &cols[m - 2];
    // q = (v_{M-1} − v_M) / N, the per-step change along a grid line.
    let q: Vec<f64> = second.iter().zip(last).map(|(a, b)| (a - b) * inv_n).collect();
    let qq = dot(&q, &q);

    let mut best = f64::INFINITY;
    let mut best_counts = vec![0usize; m];
    let mut lines = 0usize;
    let mut prefix = vec![0usize; m - 2];

    loop {
        let used: usize = prefix.iter().sum();
        if used <= n {
            lines += 1;
            let rest = n - used;
            // p = Σ_{i<M-2} (k_i/N) v_i + (rest/N) v_M
            let mut p: Vec<f64> = last.iter().map(|x| x * rest as f64 * inv_n).collect();
            for (k, col) in prefix.iter().zip(&cols) {
                if *k > 0 {
                    let c = *k as f64 * inv_n;
                    for (pi, x) in p.iter_mut().zip(col) {
                        *pi += c * x;
                    }
                }
            }
            let pp = dot(&p, &p);
            let pq = dot(&p, &q);
            let eval = |t: usize| {
                let t = t as f64;
                pp + 2.0 * t * pq + t * t * qq
            };
            let mut candidates = [0usize, rest, 0, 0];
            if qq > 0.0 {
                let t_star = (-pq / qq).clamp(0.0, rest as f64);
                candidates[2] = t_star.floor() as usize;
                candidates[3] = (t_star.ceil() as usize).min(rest);
            }
            for t in candidates {
                let f = eval(t);
                if f < best {
                    best = f;
                    best_counts[..m - 2].copy_from_slice(&prefix);
                    best_counts[m - 2] = t;
                    best_counts[m - 1] = rest - t;
                }
            }
        }
        // Odometer over the first M-2 grid coordinates.
        let mut i = 0;
        loop {
            if i == prefix.len() {
                let weights: Vec<f64> = best_counts.iter().map(|c| *c as f64 * inv_n).collect();
                let weights = SimplexWeights::new(weights)?;
                return Ok(MinNormResult::from_weights(v, weights, lines));
            }
            prefix[i] += 1;
            if prefix.iter().sum::<usize>() <= n {
                break;
            }
            prefix[i] = 0;
            i += 1;
        }
    }
}

/// `‖Vλ‖` for arbitrary weights.
pub fn combined_norm(v: &DenseMatrix, weights: &[f64]) -> f64 {
    norm(combine_columns(v, weights).as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SeededRng;
    use approx::assert_relative_eq;

    fn cols(c: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_columns(&c.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Independent projection oracle: grid search over Δ² at the given step.
    fn grid_projection_2(v: [f64; 2], step: f64) -> [f64; 2] {
        let n = (1.0 / step).round() as usize;
        let mut best = (f64::INFINITY, [0.0, 0.0]);
        for k in 0..=n {
            let x = [k as f64 / n as f64, 1.0 - k as f64 / n as f64];
            let d = (x[0] - v[0]).powi(2) + (x[1] - v[1]).powi(2);
            if d < best.0 {
                best = (d, x);
            }
        }
        best.1
    }

    #[test]
    fn project_simplex_examples() {
        let p = project_simplex(&DenseVector::new(vec![0.6, 0.6])).unwrap();
        assert_relative_eq!(p.as_slice()[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(p.as_slice()[1], 0.5, epsilon = 1e-15);

        let p = project_simplex(&DenseVector::new(vec![1.0, 0.0])).unwrap();
        assert_eq!(p.as_slice(), &[1.0, 0.0]);

        let oracle = grid_projection_2([0.3, 0.1], 1e-4);
        assert_relative_eq!(oracle[0], 0.6, epsilon = 1e-9);
        assert_relative_eq!(oracle[1], 0.4, epsilon = 1e-9);
        let p = project_simplex(&DenseVector::new(vec![0.3, 0.1])).unwrap();
        assert_relative_eq!(p.as_slice()[0], 0.6, epsilon = 1e-12);
        assert_relative_eq!(p.as_slice()[1], 0.4, epsilon = 1e-12);
    }

    #[test]
    fn project_simplex_rejects_empty() {
        assert!(project_simplex(&DenseVector::new(vec![])).is_err());
    }

    #[test]
    fn simplex_weights_validation() {
        assert!(SimplexWeights::new(vec![0.5, 0.5]).is_ok());
        assert!(SimplexWeights::new(vec![0.6, 0.5]).is_err());
        assert!(SimplexWeights::new(vec![1.5, -0.5]).is_err());
        assert!(SimplexWeights::new(vec![]).is_err());
        let json = serde_json::to_string(&SimplexWeights::uniform(4)).unwrap();
        assert_eq!(json, "[0.25,0.25,0.25,0.25]");
        assert!(serde_json::from_str::<SimplexWeights>("[0.9,0.2]").is_err());
    }

    /// Independent min-norm oracle for two columns: scan the segment.
    fn grid_min_norm_2(v: &DenseMatrix, step: f64) -> (f64, f64) {
        let n = (1.0 / step).round() as usize;
        (0..=n)
            .map(|k| {
                let t = k as f64 / n as f64;
                (t, combined_norm(v, &[t, 1.0 - t]))
            })
            .fold((0.0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc })
    }

    #[test]
    fn min_norm_examples() {
        let r = min_norm_weights(&cols(&[&[1.0, 0.0], &[0.0, 1.0]]), 1e-8, 500).unwrap();
        assert_relative_eq!(r.weights.as_slice()[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(r.norm, 0.5f64.sqrt(), epsilon = 1e-12);

        let g = [3.0, -4.0];
        let r = min_norm_weights(&cols(&[&g, &g]), 1e-8, 500).unwrap();
        assert_eq!(r.weights.as_slice(), &[0.5, 0.5]);
        assert_relative_eq!(r.norm, 5.0, epsilon = 1e-12);

        let v = cols(&[&[2.0, 0.0], &[-1.0, 0.0]]);
        let (t, n) = grid_min_norm_2(&v, 1e-4);
        assert!((t - 1.0 / 3.0).abs() < 1e-4 && n < 2e-4);
        let r = min_norm_weights(&v, 1e-8, 500).unwrap();
        assert_relative_eq!(r.weights.as_slice()[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(r.weights.as_slice()[1], 2.0 / 3.0, epsilon = 1e-12);
        assert!(r.norm < 1e-12);
    }

    #[test]
    fn min_norm_identical_columns_many_tasks_keeps_uniform() {
        let g = [1.0, 2.0];
        let r = min_norm_weights(&cols(&[&g, &g, &g]), 1e-8, 500).unwrap();
        for w in r.weights.as_slice() {
            assert_relative_eq!(*w, 1.0 / 3.0, epsilon = 1e-15);
        }
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn min_norm_three_task_symmetric_case() {
        // Three unit vectors at 120°: the hull contains the origin.
        let a = 2.0 * std::f64::consts::PI / 3.0;
        let v = cols(&[&[1.0, 0.0], &[a.cos(), a.sin()], &[(2.0 * a).cos(), (2.0 * a).sin()]]);
        let r = min_norm_weights(&v, 1e-12, 1000).unwrap();
        assert!(r.norm < 1e-6);
        for w in r.weights.as_slice() {
            assert_relative_eq!(*w, 1.0 / 3.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn min_norm_reports_non_convergence() {
        let mut rng = SeededRng::new(11);
        let v = DenseMatrix::from_row_major(6, 5, rng.normal_vec(30)).unwrap();
        match min_norm_weights(&v, 1e-300, 2) {
            Err(Error::NonConvergence { last, .. }) => {
                assert_eq!(last.len(), 5);
                assert!((last.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn min_norm_rejects_bad_arguments() {
        assert!(min_norm_weights(&DenseMatrix::zeros(2, 0), 1e-8, 10).is_err());
        assert!(min_norm_weights(&DenseMatrix::identity(2), 0.0, 10).is_err());
    }

    #[test]
    fn regularized_step_examples() {
        let half = SimplexWeights::uniform(2);
        let zero = DenseMatrix::zeros(3, 2);
        for mode in [StepMode::InnerProduct, StepMode::Cosine] {
            let out = regularized_weight_step(&half, &zero, &half, 0.1, 1.0, mode).unwrap();
            assert_relative_eq!(out.as_slice()[0], 0.5, epsilon = 1e-12);
        }
        let lam = SimplexWeights::new(vec![0.2, 0.8]).unwrap();
        let v = cols(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        let out = regularized_weight_step(&lam, &v, &half, 0.1, 0.0, StepMode::InnerProduct).unwrap();
        assert_relative_eq!(out.as_slice()[0], 0.2, epsilon = 1e-12);
        assert_relative_eq!(out.as_slice()[1], 0.8, epsilon = 1e-12);

        // VᵀVλ = (0.5, 0.5) → pre-projection (0, 0) → (0.5, 0.5).
        let v = DenseMatrix::identity(2);
        let out = regularized_weight_step(&half, &v, &half, 0.0, 1.0, StepMode::InnerProduct).unwrap();
        assert_relative_eq!(out.as_slice()[0], 0.5, epsilon = 1e-15);
        let (t, _) = grid_min_norm_2(&v, 1e-4);
        assert_relative_eq!(t, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn regularized_step_cosine_direction() {
        // Columns (1,0) and (0,3); target Vλ = (0.5, 1.5) with λ uniform and ρ = 0.
        let v = cols(&[&[1.0, 0.0], &[0.0, 3.0]]);
        let half = SimplexWeights::uniform(2);
        let out = regularized_weight_step(&half, &v, &half, 0.0, 0.5, StepMode::Cosine).unwrap();
        let tn = (0.25f64 + 2.25).sqrt();
        let (c1, c2) = (0.5 / tn, 1.5 / tn);
        let expected = project_simplex(&DenseVector::new(vec![0.5 - 0.5 * c1, 0.5 - 0.5 * c2])).unwrap();
        assert_relative_eq!(out.as_slice()[0], expected.as_slice()[0], epsilon = 1e-15);
        assert!(out.as_slice()[0] > out.as_slice()[1]);
    }

    #[test]
    fn regularized_step_rejects_bad_arguments() {
        let half = SimplexWeights::uniform(2);
        let v = DenseMatrix::identity(2);
        assert!(regularized_weight_step(&half, &v, &half, -1.0, 1.0, StepMode::Cosine).is_err());
        assert!(regularized_weight_step(&half, &v, &half, 0.0, -1.0, StepMode::Cosine).is_err());
        let third = SimplexWeights::uniform(3);
        assert!(regularized_weight_step(&third, &v, &half, 0.0, 1.0, StepMode::Cosine).is_err());
    }

    #[test]
    fn brute_force_examples() {
        let r = brute_force_min_norm(&DenseMatrix::identity(2), 1e-3).unwrap();
        assert!((r.weights.as_slice()[0] - 0.5).abs() <= 1e-3);

        let r = brute_force_min_norm(&cols(&[&[3.0, 4.0]]), 1e-2).unwrap();
        assert_eq!(r.weights.as_slice(), &[1.0]);
        assert_relative_eq!(r.norm, 5.0);

        let r = brute_force_min_norm(&cols(&[&[2.0, 0.0], &[-1.0, 0.0]]), 1e-4).unwrap();
        assert!(r.norm <= 2e-4);
    }

    #[test]
    fn brute_force_rejects_bad_arguments() {
        let v = DenseMatrix::identity(5);
        assert!(brute_force_min_norm(&v, 1e-2).is_err());
        assert!(brute_force_min_norm(&DenseMatrix::identity(2), 0.5).is_err());
        assert!(brute_force_min_norm(&DenseMatrix::identity(2), 0.0).is_err());
    }

    #[test]
    fn brute_force_matches_plain_enumeration() {
        // Cross-check the line-scan shortcut against a naive triple loop.
        let mut rng = SeededRng::new(5);
        for _ in 0..20 {
            let v = DenseMatrix::from_row_major(3, 4, rng.normal_vec(12)).unwrap();
            let n = 40;
            let mut naive = f64::INFINITY;
            for a in 0..=n {
                for b in 0..=n - a {
                    for c in 0..=n - a - b {
                        let w = [a, b, c, n - a - b - c].map(|k| k as f64 / n as f64);
                        naive = naive.min(combined_norm(&v, &w));
                    }
                }
            }
            let fast = brute_force_min_norm(&v, 1.0 / n as f64).unwrap();
            assert!((fast.norm - naive).abs() < 1e-12, "{} vs {}", fast.norm, naive);
        }
    }

    mod props {
        use super::super::*;
        use crate::linalg::SeededRng;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(200))]

            #[test]
            fn projection_lands_on_simplex_and_is_idempotent(
                v in prop::collection::vec(-5.0..5.0f64, 1..10)
            ) {
                let p = project_simplex(&DenseVector::new(v)).unwrap();
                let s: f64 = p.as_slice().iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-9);
                prop_assert!(p.as_slice().iter().all(|x| *x >= 0.0));
                let again = project_simplex(&DenseVector::new(p.as_slice().to_vec())).unwrap();
                for (a, b) in p.as_slice().iter().zip(again.as_slice()) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }

            #[test]
            fn min_norm_is_scale_equivariant(seed in any::<u64>(), m in 2usize..6, c in 0.01..100.0f64) {
                let mut rng = SeededRng::new(seed);
                let v = DenseMatrix::from_row_major(5, m, rng.normal_vec(5 * m)).unwrap();
                let base = min_norm_weights(&v, 1e-12, 100_000).unwrap();
                let scaled = min_norm_weights(&v.scale(c), 1e-12 * c * c, 100_000).unwrap();
                prop_assert!((scaled.norm - c * base.norm).abs() <= 1e-6 * c * (1.0 + base.norm));
            }

            #[test]
            fn min_norm_beats_brute_force(seed in any::<u64>(), m in 2usize..=4, rows in 1usize..=8) {
                let mut rng = SeededRng::new(seed);
                let v = DenseMatrix::from_row_major(rows, m, rng.normal_vec(rows * m)).unwrap();
                let res = 1e-2;
                let fw = min_norm_weights(&v, 1e-8, 500).unwrap();
                let bf = brute_force_min_norm(&v, res).unwrap();
                let slack: f64 = res * v.column_norms().iter().sum::<f64>();
                prop_assert!(fw.norm <= bf.norm + slack);
                // The solver's weights and direction stay consistent.
                let dir = combine_columns(&v, fw.weights.as_slice());
                prop_assert!((dir.norm() - fw.norm).abs() <= 1e-9);
            }

            #[test]
            fn weight_step_descends_on_fixed_matrix(seed in any::<u64>(), m in 2usize..6) {
                let mut rng = SeededRng::new(seed);
                let v = DenseMatrix::from_row_major(4, m, rng.normal_vec(4 * m)).unwrap();
                let gram = v.gram();
                let lipschitz: f64 = (0..m).map(|i| gram.get(i, i)).sum();
                let beta = 1.0 / lipschitz.max(1e-12);
                let lambda0 = SimplexWeights::uniform(m);
                let mut lambda = SimplexWeights::uniform(m);
                let mut prev = combined_norm(&v, lambda.as_slice()).powi(2);
                for _ in 0..200 {
                    lambda = regularized_weight_step(&lambda, &v, &lambda0, 0.0, beta, StepMode::InnerProduct).unwrap();
                    let cur = combined_norm(&v, lambda.as_slice()).powi(2);
                    prop_assert!(cur <= prev + 1e-10);
                    prev = cur;
                }
            }
        }
    }
}
