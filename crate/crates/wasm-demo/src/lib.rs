//! Browser bindings for the demo page in `www/`.
//!
//! Every export returns a flat `Float64Array`; the layouts are documented on
//! each function. Drawing happens in JavaScript.

use multibalance::balancers::BalancerKind;
use multibalance::harness::config::{ExperimentConfig, TaskConfig};
use multibalance::harness::Trainer;
use multibalance::simplex::{min_norm_weights, project_simplex, DEFAULT_MIN_NORM_MAX_ITER, DEFAULT_MIN_NORM_TOL};
use multibalance::{DenseMatrix, DenseVector, Error, Result};
use wasm_bindgen::prelude::*;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Min-norm point of the convex hull of 2-D gradients given as
/// `[x0, y0, x1, y1, ...]`. Returns `[λ_0 .. λ_{M-1}, dx, dy]`.
#[wasm_bindgen]
pub fn min_norm_point(xy: &[f64]) -> std::result::Result<Vec<f64>, JsError> {
    hull_min_norm(xy).map_err(js)
}

/// Euclidean projection of `x` onto the probability simplex.
#[wasm_bindgen]
pub fn simplex_projection(x: &[f64]) -> std::result::Result<Vec<f64>, JsError> {
    Ok(project_simplex(&DenseVector::new(x.to_vec()))
        .map_err(js)?
        .as_slice()
        .to_vec())
}

/// Paths of summed-loss training and MultiBalance on two 2-D quadratics
/// centred at (±1, 0), the second with curvature `h2`. Returns `steps + 1`
/// points per method, then the MultiBalance weight on task 0 per step:
/// `[vanilla xy.., multibalance xy.., λ_0..]`.
#[wasm_bindgen]
pub fn quadratic_paths(
    h2: f64,
    beta: f64,
    start_x: f64,
    start_y: f64,
    steps: usize,
) -> std::result::Result<Vec<f64>, JsError> {
    quadratic_trajectories(h2, beta, [start_x, start_y], steps).map_err(js)
}

/// Task weights of MultiBalance on a three-task synthetic network whose
/// first task's loss is multiplied by `scale`. Returns `[λ_0, λ_1, λ_2]` per
/// step followed by the three raw gradient norms per step.
#[wasm_bindgen]
pub fn dominance_weights(scale: f64, steps: usize, seed: u64) -> std::result::Result<Vec<f64>, JsError> {
    dominance(scale, steps, seed).map_err(js)
}

pub fn hull_min_norm(xy: &[f64]) -> Result<Vec<f64>> {
    if xy.is_empty() || !xy.len().is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "expected x/y pairs, got {} numbers",
            xy.len()
        )));
    }
    let cols: Vec<Vec<f64>> = xy.chunks(2).map(<[f64]>::to_vec).collect();
    let v = DenseMatrix::from_columns(&cols)?;
    let r = min_norm_weights(&v, DEFAULT_MIN_NORM_TOL, DEFAULT_MIN_NORM_MAX_ITER)?;
    let mut out = r.weights.as_slice().to_vec();
    out.extend_from_slice(r.direction.as_slice());
    Ok(out)
}

fn quadratic_config(kind: BalancerKind, h2: f64, beta: f64, start: [f64; 2], steps: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::quadratic(
        vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
        Some(vec![
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![h2, 0.0], vec![0.0, h2]],
        ]),
        steps,
    );
    if let TaskConfig::Quadratic(q) = &mut cfg.task {
        q.theta0 = Some(start.to_vec());
    }
    cfg.balancer.name = kind;
    cfg.balancer.beta = beta;
    cfg.balancer.gamma = 1.0;
    cfg.balancer.rho = 0.0;
    cfg.balancer.cosine_mode = false;
    cfg.training.learning_rate = 0.05;
    cfg
}

pub fn quadratic_trajectories(h2: f64, beta: f64, start: [f64; 2], steps: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(5 * (steps + 1));
    let mut weights = Vec::with_capacity(steps);
    for kind in [BalancerKind::Vanilla, BalancerKind::Multibalance] {
        let mut trainer = Trainer::new(&quadratic_config(kind, h2, beta, start, steps))?;
        out.extend_from_slice(&start);
        for _ in 0..steps {
            let r = trainer.step()?;
            if kind == BalancerKind::Multibalance {
                weights.push(r.lambda[0]);
            }
            out.extend_from_slice(trainer.workload().theta().expect("quadratic workload").as_slice());
        }
    }
    out.extend(weights);
    Ok(out)
}

pub fn dominance(scale: f64, steps: usize, seed: u64) -> Result<Vec<f64>> {
    let mut cfg = ExperimentConfig::desk(3, seed);
    if let TaskConfig::Synthetic(s) = &mut cfg.task {
        s.scales = vec![scale, 1.0, 1.0];
        s.noise_std = 0.1;
    }
    cfg.steps = steps;
    let mut trainer = Trainer::new(&cfg)?;
    let mut lambda = Vec::with_capacity(3 * steps);
    let mut norms = Vec::with_capacity(3 * steps);
    for _ in 0..steps {
        let r = trainer.step()?;
        lambda.extend_from_slice(&r.lambda);
        norms.extend_from_slice(&r.raw_grad_norms);
    }
    lambda.extend(norms);
    Ok(lambda)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hull_point_of_opposite_vectors_is_the_origin() {
        let out = hull_min_norm(&[1.0, 0.0, -1.0, 0.0]).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-12 && out[2].abs() < 1e-12 && out[3].abs() < 1e-12);
        assert!(hull_min_norm(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn quadratic_paths_have_the_documented_layout() {
        let out = quadratic_trajectories(3.0, 0.2, [0.2, 1.5], 50).unwrap();
        assert_eq!(out.len(), 2 * 2 * 51 + 50);
        assert_eq!(&out[..2], &[0.2, 1.5]);
        assert_eq!(&out[102..104], &[0.2, 1.5]);
        // Summed-loss training heads to the curvature-weighted mean.
        let end = &out[100..102];
        assert!(end[1].abs() < 1e-3 && end[0] < 0.0);
    }

    #[test]
    fn dominance_layout() {
        let out = dominance(10.0, 20, 0).unwrap();
        assert_eq!(out.len(), 2 * 3 * 20);
        assert!(out[..60].chunks(3).all(|l| (l.iter().sum::<f64>() - 1.0).abs() < 1e-9));
    }
}
