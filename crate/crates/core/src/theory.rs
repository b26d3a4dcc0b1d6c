//! Numerical checks of the representation-gradient surrogate: the min-norm
//! sandwich inequalities, the residual of the mean-Jacobian factorization,
//! the resulting stationarity bound, and stationarity measurements.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, spectral_norm, sym_eig_bounds, DenseMatrix, DenseVector};
use crate::model::{Batch, SharedBottomModel};
use crate::simplex::{combine_columns, combined_norm, min_norm_weights, SimplexWeights};

/// Absolute slack used for every inequality check in this module.
pub const CHECK_SLACK: f64 = 1e-8;

/// Duality-gap tolerance for the min-norm solves done here.
pub const ORACLE_TOL: f64 = 1e-10;

const ORACLE_MAX_ITER: usize = 100_000;
const SPECTRAL_TOL: f64 = 1e-12;
const SPECTRAL_MAX_ITER: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub mu: f64,
    pub ell: f64,
    pub lambda_a: Vec<f64>,
    pub lambda_ba: Vec<f64>,
    /// `μ²‖Aλ_A‖², μ²‖Aλ_BA‖², ‖BAλ_BA‖², ‖BAλ_A‖², ℓ²‖Aλ_A‖²`
    pub terms: [f64; 5],
    pub pass: bool,
}

impl Lemma1Report {
    /// Largest gap between consecutive terms; zero when the chain is tight.
    pub fn max_gap(&self) -> f64 {
        self.terms.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max)
    }
}

/// Evaluates the chain
/// `μ²‖Aλ_A‖² ≤ μ²‖Aλ_BA‖² ≤ ‖BAλ_BA‖² ≤ ‖BAλ_A‖² ≤ ℓ²‖Aλ_A‖²`
/// where `λ_X` minimizes `‖Xλ‖` over the simplex and `μ, ℓ` are the extreme
/// singular values of `B`.
pub fn check_lemma1(a: &DenseMatrix, b: &DenseMatrix) -> Result<Lemma1Report> {
    if b.cols() != a.rows() {
        return Err(Error::dims("check_lemma1", a.rows(), b.cols()));
    }
    let ba = b.matmul(a)?;
    let (mu, ell) = sym_eig_bounds(&b.gram())?;
    let lambda_a = min_norm_weights(a, ORACLE_TOL, ORACLE_MAX_ITER)?.weights;
    let lambda_ba = min_norm_weights(&ba, ORACLE_TOL, ORACLE_MAX_ITER)?.weights;
    let sq = |m: &DenseMatrix, w: &SimplexWeights| combined_norm(m, w.as_slice()).powi(2);
    let terms = [
        mu * mu * sq(a, &lambda_a),
        mu * mu * sq(a, &lambda_ba),
        sq(&ba, &lambda_ba),
        sq(&ba, &lambda_a),
        ell * ell * sq(a, &lambda_a),
    ];
    let pass = terms.iter().all(|t| t.is_finite()) && terms.windows(2).all(|w| w[0] <= w[1] + CHECK_SLACK);
    Ok(Lemma1Report {
        mu,
        ell,
        lambda_a: lambda_a.into_vec(),
        lambda_ba: lambda_ba.into_vec(),
        terms,
        pass,
    })
}

/// Deliberate corruptions used to check that the checks can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    #[default]
    None,
    NegateResidual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub batch_size: usize,
    pub pool_size: usize,
    /// `δ = ‖R_B‖`
    pub residual_norm: f64,
    /// `‖∇_W F λ‖` on the batch.
    pub param_grad_norm: f64,
    /// `ε = ‖∇_Φ F λ‖`, the batch representation gradient combined by `λ`.
    pub surrogate_norm: f64,
    /// `ℓ = ‖E[∇_W Φ]‖₂`, with the expectation replaced by the pool mean.
    pub ell: f64,
    /// `ℓε + δ`
    pub bound: f64,
    /// `‖∇_W F λ − (E[∇_W Φ]ᵀ ∇_Φ F λ + R_B)‖`; zero up to rounding unless
    /// the residual was corrupted.
    pub decomposition_error: f64,
}

impl ResidualReport {
    pub fn is_valid(&self) -> bool {
        [
            self.residual_norm,
            self.param_grad_norm,
            self.surrogate_norm,
            self.ell,
            self.bound,
            self.decomposition_error,
        ]
        .iter()
        .all(|x| x.is_finite() && *x >= 0.0)
    }

    pub fn slack(&self) -> f64 {
        self.bound - self.param_grad_norm
    }
}

/// Splits the weighted shared-parameter gradient on `batch` into the
/// pool-mean Jacobian applied to the representation gradient plus the
/// residual `R_B`.
pub fn estimate_residual(
    model: &SharedBottomModel,
    reference_pool: &Batch,
    batch: &Batch,
    lambda: &SimplexWeights,
) -> Result<ResidualReport> {
    estimate_residual_with(model, reference_pool, batch, lambda, Fault::None)
}

pub fn estimate_residual_with(
    model: &SharedBottomModel,
    reference_pool: &Batch,
    batch: &Batch,
    lambda: &SimplexWeights,
    fault: Fault,
) -> Result<ResidualReport> {
    if reference_pool.len() < batch.len() {
        return Err(Error::InvalidArgument(format!(
            "reference pool ({}) is smaller than the batch ({})",
            reference_pool.len(),
            batch.len()
        )));
    }
    if lambda.dim() != model.task_count() {
        return Err(Error::dims(
            "estimate_residual (lambda)",
            model.task_count(),
            lambda.dim(),
        ));
    }
    let trace = model.forward(batch)?;
    let per_task = model.backward_per_task(&trace, batch)?;
    let param_grad = combine_columns(&per_task.bottom_matrix(), lambda.as_slice());

    let repr_grad = combine_columns(&per_task.representation_mean(), lambda.as_slice());
    let mean_jac = model.mean_jacobian_repr(reference_pool.inputs())?;
    let ell = spectral_norm(&mean_jac, SPECTRAL_TOL, SPECTRAL_MAX_ITER)?;
    let factored = mean_jac.transposed_matvec(repr_grad.as_slice())?;

    let mut residual: Vec<f64> = param_grad
        .as_slice()
        .iter()
        .zip(&factored)
        .map(|(g, f)| g - f)
        .collect();
    if fault == Fault::NegateResidual {
        residual.iter_mut().for_each(|r| *r = -*r);
    }
    let decomposition_error = norm(
        &param_grad
            .as_slice()
            .iter()
            .zip(&factored)
            .zip(&residual)
            .map(|((g, f), r)| g - f - r)
            .collect::<Vec<_>>(),
    );
    let residual_norm = norm(&residual);
    let surrogate_norm = repr_grad.norm();
    Ok(ResidualReport {
        batch_size: batch.len(),
        pool_size: reference_pool.len(),
        residual_norm,
        param_grad_norm: param_grad.norm(),
        surrogate_norm,
        ell,
        bound: ell * surrogate_norm + residual_norm,
        decomposition_error,
    })
}

/// `‖∇_W F λ‖ ≤ ℓε + δ` up to [`CHECK_SLACK`].
pub fn check_theorem1(report: &ResidualReport) -> bool {
    report.is_valid() && report.param_grad_norm <= report.bound + CHECK_SLACK
}

/// Norm of the min-norm point of the convex hull of the columns.
pub fn stationarity_gap(g: &DenseMatrix) -> Result<f64> {
    if g.cols() == 0 {
        return Err(Error::InvalidArgument(
            "stationarity_gap needs at least one column".into(),
        ));
    }
    let scale = g.column_norms().iter().fold(0.0f64, |m, n| m.max(n * n));
    if scale == 0.0 {
        return Ok(0.0);
    }
    let tol = (1e-12 * scale).max(f64::MIN_POSITIVE);
    Ok(min_norm_weights(g, tol, ORACLE_MAX_ITER)?.norm)
}

/// `min_m ⟨g_m, d⟩`
pub fn decrease_rate(g: &DenseMatrix, d: &DenseVector) -> Result<f64> {
    if g.rows() != d.dim() {
        return Err(Error::dims("decrease_rate", g.rows(), d.dim()));
    }
    if g.cols() == 0 {
        return Err(Error::InvalidArgument("decrease_rate needs at least one column".into()));
    }
    Ok(g.columns()
        .iter()
        .map(|c| dot(c, d.as_slice()))
        .fold(f64::INFINITY, f64::min))
}
