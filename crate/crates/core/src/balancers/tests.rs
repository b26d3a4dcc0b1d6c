use super::*;
use crate::simplex::{brute_force_min_norm, combined_norm};
use approx::assert_relative_eq;
use proptest::prelude::*;

fn cols(c: &[&[f64]]) -> DenseMatrix {
    DenseMatrix::from_columns(&c.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn random_matrix(rng: &mut SeededRng, rows: usize, m: usize) -> DenseMatrix {
    DenseMatrix::from_row_major(rows, m, rng.normal_vec(rows * m)).unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

#[test]
fn multibalance_single_task_returns_the_gradient() {
    let g = cols(&[&[0.3, -2.0, 1.5]]);
    let mut st = BalancerState::new(1);
    let out = multibalance_step(&g, &mut st).unwrap();
    assert_eq!(out.aggregate.as_slice(), &[0.3, -2.0, 1.5]);
    assert_eq!(out.weights.as_slice(), &[1.0]);
}

#[test]
fn multibalance_with_full_ema_rate_is_projected_descent_on_raw_gradients() {
    let mut rng = SeededRng::new(1);
    let mut st = BalancerState::with_params(
        3,
        &BalancerParams {
            gamma: 1.0,
            rho: 0.0,
            beta: 0.3,
            cosine_mode: false,
            ..Default::default()
        },
    )
    .unwrap();
    for _ in 0..5 {
        let g = random_matrix(&mut rng, 4, 3);
        let before = st.lambda.clone();
        let out = multibalance_step(&g, &mut st).unwrap();
        assert_eq!(out.processed, g);
        let expected = regularized_weight_step(
            &before,
            &g,
            &SimplexWeights::uniform(3),
            0.0,
            0.3,
            StepMode::InnerProduct,
        )
        .unwrap();
        assert_eq!(out.weights.as_slice(), expected.as_slice());
    }
}

#[test]
fn multibalance_symmetric_fixed_point() {
    let g = cols(&[&[10.0, 0.0], &[0.0, 1.0]]);
    for mode in [true, false] {
        for beta in [0.1, 1.0, 7.0] {
            let mut st = BalancerState::with_params(
                2,
                &BalancerParams {
                    gamma: 0.0,
                    rho: 0.0,
                    beta,
                    cosine_mode: mode,
                    ..Default::default()
                },
            )
            .unwrap();
            st.ema_norms = vec![1.0, 1.0];
            let out = multibalance_step(&g, &mut st).unwrap();
            assert_eq!(out.processed, cols(&[&[1.0, 0.0], &[0.0, 1.0]]));
            assert_relative_eq!(out.weights.as_slice()[0], 0.5, epsilon = 1e-15);
            assert_relative_eq!(out.aggregate.as_slice()[0], 0.5, epsilon = 1e-15);
            assert_relative_eq!(out.aggregate.as_slice()[1], 0.5, epsilon = 1e-15);
        }
    }
    // The fixed point is the grid minimizer of the rescaled matrix.
    let grid = brute_force_min_norm(&cols(&[&[1.0, 0.0], &[0.0, 1.0]]), 1e-3).unwrap();
    assert_relative_eq!(grid.weights.as_slice()[0], 0.5, epsilon = 1e-12);
}

#[test]
fn multibalance_zero_column_is_not_rescaled() {
    let g = cols(&[&[0.0, 0.0], &[3.0, 4.0]]);
    let mut st = BalancerState::new(2);
    st.ema_norms = vec![2.0, 2.0];
    let out = multibalance_step(&g, &mut st).unwrap();
    assert_eq!(out.processed.column(0), vec![0.0, 0.0]);
    assert!(out.aggregate.is_finite());
}

#[test]
fn multibalance_rejects_wrong_task_count() {
    let mut st = BalancerState::new(3);
    assert!(multibalance_step(&DenseMatrix::zeros(2, 2), &mut st).is_err());
}

#[test]
fn iterated_weight_steps_reach_the_min_norm_point() {
    let mut rng = SeededRng::new(4);
    for _ in 0..10 {
        let g = random_matrix(&mut rng, 6, 3);
        let gram = g.gram();
        let trace: f64 = (0..3).map(|i| gram.get(i, i)).sum();
        let mut st = BalancerState::with_params(
            3,
            &BalancerParams {
                gamma: 1.0,
                rho: 0.0,
                beta: 1.0 / trace,
                cosine_mode: false,
                ..Default::default()
            },
        )
        .unwrap();
        for _ in 0..20_000 {
            multibalance_step(&g, &mut st).unwrap();
        }
        let exact = min_norm_weights(&g, 1e-12, 10_000).unwrap();
        assert!((combined_norm(&g, st.lambda.as_slice()) - exact.norm).abs() < 1e-6);
    }
}

#[test]
fn mgda_examples() {
    let out = mgda_step(&cols(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
    assert_relative_eq!(out.weights.as_slice()[0], 0.5, epsilon = 1e-12);
    let out = mgda_step(&cols(&[&[2.0, 0.0], &[-1.0, 0.0]])).unwrap();
    assert!(out.aggregate.norm() < 1e-12);
    let g = cols(&[&[1.0, 0.0], &[3.0, 0.0]]);
    let out = mgda_step(&g).unwrap();
    assert_eq!(out.weights.as_slice(), &[1.0, 0.0]);
    assert_eq!(out.aggregate.as_slice(), &[1.0, 0.0]);
    let grid = brute_force_min_norm(&g, 1e-3).unwrap();
    assert_eq!(grid.weights.as_slice(), &[1.0, 0.0]);
}

#[test]
fn moco_with_full_rate_matches_mgda() {
    let mut rng = SeededRng::new(5);
    let mut st = BalancerState::with_params(
        3,
        &BalancerParams {
            gamma: 1.0,
            ..Default::default()
        },
    )
    .unwrap();
    for _ in 0..5 {
        let g = random_matrix(&mut rng, 5, 3);
        assert_eq!(moco_step(&g, &mut st).unwrap(), mgda_step(&g).unwrap());
    }
}

#[test]
fn moco_tracks_a_constant_matrix() {
    let g = random_matrix(&mut SeededRng::new(6), 5, 3);
    let mut st = BalancerState::with_params(
        3,
        &BalancerParams {
            gamma: 0.1,
            ..Default::default()
        },
    )
    .unwrap();
    let mut out = None;
    for _ in 0..200 {
        out = Some(moco_step(&g, &mut st).unwrap());
    }
    let reference = mgda_step(&g).unwrap();
    let got = out.unwrap();
    for (a, b) in got.aggregate.as_slice().iter().zip(reference.aggregate.as_slice()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn moco_zero_gradients_give_zero_aggregate() {
    let mut st = BalancerState::new(2);
    let out = moco_step(&DenseMatrix::zeros(3, 2), &mut st).unwrap();
    assert!(out.aggregate.as_slice().iter().all(|x| *x == 0.0));
}

#[test]
fn pcgrad_examples() {
    let mut rng = SeededRng::new(0);
    let g = cols(&[&[1.0, 2.0], &[3.0, 0.5]]);
    let out = pcgrad_step(&g, &mut rng).unwrap();
    assert_eq!(out.aggregate.as_slice(), &[2.0, 1.25]);

    let out = pcgrad_step(&cols(&[&[1.0, 0.0], &[-1.0, 1.0]]), &mut rng).unwrap();
    assert_eq!(out.processed.column(0), vec![0.5, 0.5]);

    let out = pcgrad_step(&cols(&[&[1.0, -2.0], &[-1.0, 2.0]]), &mut rng).unwrap();
    assert!(out.processed.as_slice().iter().all(|x| x.abs() < 1e-15));
    assert!(out.aggregate.as_slice().iter().all(|x| x.abs() < 1e-15));
}

#[test]
fn gradvac_no_adjustment_and_target_attainment() {
    // First observation seeds the targets, so nothing moves.
    let g = cols(&[&[1.0, 0.2], &[-0.5, 1.0]]);
    let mut st = BalancerState::new(2);
    let out = gradvac_step(&g, &mut st).unwrap();
    assert_eq!(out.processed, g);

    // Orthogonal pair with target 0 is already on target.
    let g = cols(&[&[1.0, 0.0], &[0.0, 2.0]]);
    let mut st = BalancerState::new(2);
    st.pairwise_seen = vec![true; 4];
    let out = gradvac_step(&g, &mut st).unwrap();
    assert_eq!(out.processed, g);

    // Raised targets are met exactly.
    let g = cols(&[&[1.0, 0.0, 0.3], &[-0.4, 1.0, 0.0]]);
    let mut st = BalancerState::new(2);
    st.pairwise_seen = vec![true; 4];
    st.pairwise_cos_ema = DenseMatrix::from_rows(&[vec![0.0, 0.5], vec![0.2, 0.0]]).unwrap();
    let out = gradvac_step(&g, &mut st).unwrap();
    assert_relative_eq!(cosine(&out.processed.column(0), &g.column(1)), 0.5, epsilon = 1e-12);
    assert_relative_eq!(cosine(&out.processed.column(1), &g.column(0)), 0.2, epsilon = 1e-12);
}

#[test]
fn graddrop_examples() {
    let mut rng = SeededRng::new(1);
    let g = cols(&[&[1.0, -2.0, 0.0], &[3.0, -0.5, 0.0]]);
    let out = graddrop_step(&g, &mut rng).unwrap();
    assert_eq!(out.aggregate.as_slice(), &[4.0, -2.5, 0.0]);

    let g = cols(&[&[1.0, -2.0, 0.5]]);
    for _ in 0..50 {
        assert_eq!(graddrop_step(&g, &mut rng).unwrap().aggregate.as_slice(), g.as_slice());
    }
}

#[test]
fn graddrop_keep_frequency_is_a_fair_coin() {
    let g = cols(&[&[1.0], &[-1.0]]);
    let mut rng = SeededRng::new(2024);
    let n = 100_000;
    let kept_positive = (0..n)
        .filter(|_| graddrop_step(&g, &mut rng).unwrap().aggregate.as_slice()[0] > 0.0)
        .count();
    let freq = kept_positive as f64 / n as f64;
    assert!((freq - 0.5).abs() <= 0.01, "{freq}");
}

#[test]
fn dbmtl_examples() {
    let g = cols(&[&[3.0, 4.0], &[0.0, 5.0]]);
    assert_eq!(dbmtl_step(&g).unwrap().processed, g);

    let g = cols(&[&[1.0, 0.0], &[0.0, 2.0], &[6.0, 8.0]]);
    let out = dbmtl_step(&g).unwrap();
    for n in out.processed.column_norms() {
        assert_relative_eq!(n, 2.0, max_relative = 1e-12);
    }
    let g = cols(&[&[1.0, 0.0], &[0.0, -3.0]]);
    let out = dbmtl_step(&g).unwrap();
    assert_eq!(out.processed, cols(&[&[2.0, 0.0], &[0.0, -2.0]]));

    let out = dbmtl_step(&DenseMatrix::zeros(2, 3)).unwrap();
    assert!(out.aggregate.as_slice().iter().all(|x| *x == 0.0));
}

#[test]
fn imtlg_examples() {
    let out = imtlg_step(&cols(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
    assert_relative_eq!(out.weights.as_slice()[0], 0.5, epsilon = 1e-12);
    let out = imtlg_step(&cols(&[&[1.0, 0.0], &[0.0, 2.0]])).unwrap();
    assert_relative_eq!(out.weights.as_slice()[0], 2.0 / 3.0, epsilon = 1e-12);
    assert_relative_eq!(out.weights.as_slice()[1], 1.0 / 3.0, epsilon = 1e-12);
    assert_relative_eq!(out.aggregate.as_slice()[0], 2.0 / 3.0, epsilon = 1e-12);
    assert_relative_eq!(out.aggregate.as_slice()[1], 2.0 / 3.0, epsilon = 1e-12);
    assert!(!out.weights.is_simplex());
    let out = imtlg_step(&cols(&[&[0.2, 5.0]])).unwrap();
    assert_eq!(out.weights.as_slice(), &[1.0]);
}

#[test]
fn imtlg_falls_back_on_degenerate_input() {
    let out = imtlg_step(&cols(&[&[1.0, 0.0], &[0.0, 0.0]])).unwrap();
    assert_eq!(out.weights.as_slice(), &[0.5, 0.5]);
    // Identical directions make the projection system singular.
    let out = imtlg_step(&cols(&[&[1.0, 0.0], &[2.0, 0.0], &[3.0, 0.0]])).unwrap();
    assert_eq!(out.weights.as_slice(), &[1.0 / 3.0; 3]);
}

#[test]
fn uncertainty_examples() {
    let mut st = BalancerState::new(3);
    st.uncertainty_lr = 0.1;
    let out = uncertainty_reweigh(&[0.3, 1.2, 2.0], &mut st).unwrap();
    assert_eq!(out.weights, vec![1.0; 3]);
    assert_relative_eq!(out.total, 3.5, epsilon = 1e-12);

    // ∂total/∂s = −exp(−s)f + ½ vanishes at f = ½, s = 0.
    let mut st = BalancerState::new(1);
    st.uncertainty_lr = 0.1;
    uncertainty_reweigh(&[0.5], &mut st).unwrap();
    assert_eq!(st.log_vars, vec![0.0]);

    // One descent step from s = 0 with f = (1, 0.1): the gradients are
    // (−0.5, 0.4), so s moves to (0.05, −0.04).
    let mut st = BalancerState::new(2);
    st.uncertainty_lr = 0.1;
    uncertainty_reweigh(&[1.0, 0.1], &mut st).unwrap();
    assert_relative_eq!(st.log_vars[0], 0.05, epsilon = 1e-15);
    assert_relative_eq!(st.log_vars[1], -0.04, epsilon = 1e-15);
    let next = uncertainty_reweigh(&[1.0, 0.1], &mut st).unwrap();
    assert_relative_eq!(next.weights[0], (-0.05f64).exp(), epsilon = 1e-15);
    assert_relative_eq!(next.weights[1], 0.04f64.exp(), epsilon = 1e-15);
}

#[test]
fn balancer_is_deterministic_per_seed() {
    let mut rng = SeededRng::new(8);
    let gs: Vec<DenseMatrix> = (0..10).map(|_| random_matrix(&mut rng, 4, 3)).collect();
    for kind in BalancerKind::ALL {
        let run = || {
            let mut b = Balancer::new(kind, 3, &BalancerParams::default(), 17).unwrap();
            gs.iter()
                .map(|g| b.balance(g, &[0.5, 0.7, 0.2]).unwrap().aggregate)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run(), "{kind}");
    }
}

#[test]
fn params_are_validated() {
    let bad = [
        BalancerParams {
            beta: 0.0,
            ..Default::default()
        },
        BalancerParams {
            rho: -1.0,
            ..Default::default()
        },
        BalancerParams {
            gamma: 1.5,
            ..Default::default()
        },
        BalancerParams {
            lambda0: Some(vec![0.5, 0.5]),
            ..Default::default()
        },
        BalancerParams {
            lambda0: Some(vec![0.9, 0.9, -0.8]),
            ..Default::default()
        },
    ];
    for p in bad {
        assert!(BalancerState::with_params(3, &p).is_err(), "{p:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ema_rescale_and_convexity(seed in any::<u64>(), gamma in 0.0..=1.0f64, m in 1usize..5) {
        let mut rng = SeededRng::new(seed);
        let mut st = BalancerState::with_params(m, &BalancerParams { gamma, ..Default::default() }).unwrap();
        for _ in 0..5 {
            let prev = st.ema_norms.clone();
            let g = random_matrix(&mut rng, 3, m).scale(rng.uniform_range(0.1, 10.0));
            let out = multibalance_step(&g, &mut st).unwrap();
            let raw = g.column_norms();
            for (k, n) in out.processed.column_norms().iter().enumerate() {
                let u = st.ema_norms[k];
                prop_assert!((n - u).abs() <= 1e-12 * u);
                if let Some(p) = prev.get(k) {
                    let (lo, hi) = if *p < raw[k] { (*p, raw[k]) } else { (raw[k], *p) };
                    prop_assert!(u >= lo * (1.0 - 1e-15) && u <= hi * (1.0 + 1e-15));
                }
            }
        }
    }

    #[test]
    fn pcgrad_removes_pairwise_conflict(seed in any::<u64>(), d in 1usize..6) {
        let mut rng = SeededRng::new(seed);
        let g = random_matrix(&mut rng, d, 2);
        let out = pcgrad_step(&g, &mut rng).unwrap();
        prop_assert!(dot(&out.processed.column(0), &g.column(1)) >= -1e-10);
        prop_assert!(dot(&out.processed.column(1), &g.column(0)) >= -1e-10);
    }

    #[test]
    fn imtlg_equalizes_projections(seed in any::<u64>(), m in 2usize..5) {
        let mut rng = SeededRng::new(seed);
        let g = random_matrix(&mut rng, m + 2, m);
        let out = imtlg_step(&g).unwrap();
        let projections: Vec<f64> = g
            .columns()
            .iter()
            .map(|c| dot(out.aggregate.as_slice(), c) / norm(c))
            .collect();
        let mean = projections.iter().sum::<f64>() / m as f64;
        for p in projections {
            prop_assert!((p - mean).abs() <= 1e-8);
        }
    }

    #[test]
    fn dbmtl_equalizes_norms(seed in any::<u64>(), m in 1usize..7) {
        let mut rng = SeededRng::new(seed);
        let mut g = random_matrix(&mut rng, 4, m);
        for k in 0..m {
            let s = rng.uniform_range(0.01, 100.0);
            let c: Vec<f64> = g.column(k).iter().map(|x| x * s).collect();
            g.set_column(k, &c);
        }
        let mut norms = g.column_norms();
        norms.sort_by(f64::total_cmp);
        let target = if m % 2 == 1 { norms[m / 2] } else { 0.5 * (norms[m / 2 - 1] + norms[m / 2]) };
        let out = dbmtl_step(&g).unwrap();
        for n in out.processed.column_norms() {
            prop_assert!((n - target).abs() <= 1e-10 * target);
        }
    }

    #[test]
    fn graddrop_is_a_no_op_under_sign_unanimity(seed in any::<u64>(), m in 1usize..5, d in 1usize..6) {
        let mut rng = SeededRng::new(seed);
        let signs: Vec<f64> = (0..d).map(|_| if rng.uniform() < 0.5 { -1.0 } else { 1.0 }).collect();
        let mut g = DenseMatrix::zeros(d, m);
        for k in 0..d {
            for j in 0..m {
                g.set(k, j, signs[k] * rng.uniform_range(0.0, 3.0));
            }
        }
        let out = graddrop_step(&g, &mut rng).unwrap();
        prop_assert_eq!(&out.processed, &g);
    }

    #[test]
    fn gradvac_attains_the_target_cosine(seed in any::<u64>(), d in 2usize..6, target in -0.95..0.95f64) {
        let mut rng = SeededRng::new(seed);
        let g = random_matrix(&mut rng, d, 2);
        let mut st = BalancerState::new(2);
        st.pairwise_seen = vec![true; 4];
        st.pairwise_cos_ema = DenseMatrix::from_rows(&[vec![0.0, target], vec![target, 0.0]]).unwrap();
        let before = cosine(&g.column(0), &g.column(1));
        let out = gradvac_step(&g, &mut st).unwrap();
        for (i, j) in [(0, 1), (1, 0)] {
            let achieved = cosine(&out.processed.column(i), &g.column(j));
            if before < target {
                prop_assert!((achieved - target).abs() <= 1e-8, "{achieved} vs {target}");
            } else {
                prop_assert_eq!(out.processed.column(i), g.column(i));
            }
        }
    }

    #[test]
    fn min_norm_direction_never_increases_a_task_loss(seed in any::<u64>(), m in 2usize..5) {
        let mut rng = SeededRng::new(seed);
        let g = random_matrix(&mut rng, 6, m);
        let out = mgda_step(&g).unwrap();
        if out.aggregate.norm() > 0.0 {
            for c in g.columns() {
                prop_assert!(dot(&c, out.aggregate.as_slice()) >= -1e-10);
            }
        }
    }
}
