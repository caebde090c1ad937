mod common;

use approx::assert_abs_diff_eq;
use cac_core::mdp::{Environment, MultiAgentMdp};
use cac_core::oracle::{
    approximation_error, objective_and_gradient, objective_and_gradient_with, reward_fit,
    solve_value, stationary_distribution_for, td_fixed_point, tv_mismatch, visitation,
    GradientForm, Induced,
};
use cac_core::policy::{PolicyParams, Sharing, SoftmaxPolicy, TablePolicyFeatures};
use cac_core::{FeatureMap, FeatureMatrix};
use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn all_params(p: &PolicyParams) -> Vec<f64> {
    (0..p.n_agents()).flat_map(|i| p.agent_vector(i)).collect()
}

fn set_all_params(p: &mut PolicyParams, flat: &[f64]) {
    let mut at = 0;
    for i in 0..p.n_agents() {
        let len = p.agent_vector(i).len();
        p.set_agent_vector(i, &flat[at..at + len]);
        at += len;
    }
}

#[test]
fn zero_reward_has_zero_value() {
    let mdp = chain_mdp([[0.3, 0.7], [0.6, 0.4]], [0.0, 0.0], 0.9, [0.5, 0.5]);
    let (pf, params) = trivial_policy();
    let v = solve_value(&mdp, &SoftmaxPolicy::new(&pf, &params)).unwrap();
    assert!(v.iter().all(|&x| x == 0.0));
}

#[test]
fn unit_reward_single_state_value_is_geometric_sum() {
    let mdp = MultiAgentMdp::new(1, vec![1], vec![1.0], vec![1.0], vec![1.0], 0.95, 1.0).unwrap();
    let pf = TablePolicyFeatures::one_hot(1, &[1], Sharing::Personal);
    let params = PolicyParams::zeros(&pf, 1);
    let v = solve_value(&mdp, &SoftmaxPolicy::new(&pf, &params)).unwrap();
    assert_abs_diff_eq!(v[0], 20.0, epsilon = 1e-12);
}

#[test]
fn bellman_residual_is_tiny() {
    for seed in 0..10 {
        let (mdp, pf, params) = random_case(seed, 4, &[2, 3], Sharing::Split, 1.0);
        let policy = SoftmaxPolicy::new(&pf, &params);
        let induced = Induced::new(&mdp, &policy).unwrap();
        let v = solve_value(&mdp, &policy).unwrap();
        let backup = &induced.reward + &induced.chain * &v * mdp.discount();
        assert!((v - backup).amax() < 1e-10);
    }
}

#[test]
fn value_matches_monte_carlo_returns() {
    let (mdp, pf, params) = random_case(3, 2, &[2], Sharing::Personal, 1.0);
    let policy = SoftmaxPolicy::new(&pf, &params);
    let v = solve_value(&mdp, &policy).unwrap();
    let gamma = mdp.discount();
    let mut r = rng(99);
    let mut noise = rng(100);
    for start in 0..2 {
        let episodes = 10_000;
        let mut total = 0.0;
        for _ in 0..episodes {
            let mut s = start;
            let mut disc = 1.0;
            for _ in 0..500 {
                let a = policy.sample_joint_action(&s, &mut r);
                let tr = Environment::step(&mdp, &s, &a, &mut r, &mut noise);
                total += disc * tr.mean_reward;
                disc *= gamma;
                s = tr.next_state;
            }
        }
        let estimate = total / episodes as f64;
        assert!((estimate - v[start]).abs() < 0.05, "state {start}: {estimate} vs {}", v[start]);
    }
}

#[test]
fn saturated_bandit_has_vanishing_gradient() {
    let mdp = MultiAgentMdp::new(1, vec![2], vec![1.0, 1.0], vec![1.0, 0.0], vec![1.0], 0.9, 1.0).unwrap();
    let pf = TablePolicyFeatures::one_hot(1, &[2], Sharing::Personal);
    let mut params = PolicyParams::zeros(&pf, 1);
    params.set_agent_vector(0, &[20.0, -20.0]);
    let g = objective_and_gradient(&mdp, &SoftmaxPolicy::new(&pf, &params)).unwrap();
    assert!(g.personal_norm_sq().sqrt() < 1e-8);
}

#[test]
fn symmetric_bandit_at_uniform_policy_has_zero_gradient() {
    let mdp = MultiAgentMdp::new(1, vec![2], vec![1.0, 1.0], vec![0.4, 0.4], vec![1.0], 0.9, 1.0).unwrap();
    for sharing in [Sharing::Full, Sharing::Personal, Sharing::Split] {
        let pf = TablePolicyFeatures::one_hot(1, &[2], sharing);
        let params = PolicyParams::zeros(&pf, 1);
        let g = objective_and_gradient(&mdp, &SoftmaxPolicy::new(&pf, &params)).unwrap();
        assert!(g.agent_vector(0).iter().all(|&x| x.abs() < 1e-15));
    }
}

#[test]
fn gradient_matches_central_differences() {
    let eps = 1e-5;
    for seed in 0..10 {
        let (mdp, pf, params) = random_case(seed, 3, &[2, 2], Sharing::Split, 1.0);
        let g = objective_and_gradient(&mdp, &SoftmaxPolicy::new(&pf, &params)).unwrap();
        let exact: Vec<f64> = (0..2).flat_map(|i| g.agent_vector(i)).collect();
        let base = all_params(&params);
        let j = |x: &[f64]| {
            let mut p = params.clone();
            set_all_params(&mut p, x);
            objective_and_gradient(&mdp, &SoftmaxPolicy::new(&pf, &p)).unwrap().objective
        };
        for k in 0..base.len() {
            let mut up = base.clone();
            let mut down = base.clone();
            up[k] += eps;
            down[k] -= eps;
            let fd = (j(&up) - j(&down)) / (2.0 * eps);
            let tol = 1e-6 * exact[k].abs().max(1e-3);
            assert!((fd - exact[k]).abs() <= tol, "seed {seed} coord {k}: fd {fd} exact {}", exact[k]);
        }
    }
}

#[test]
fn gradient_forms_agree() {
    for seed in 0..10 {
        let (mdp, pf, params) = random_case(seed + 50, 3, &[2, 3], Sharing::Split, 1.5);
        let policy = SoftmaxPolicy::new(&pf, &params);
        let a = objective_and_gradient_with(&mdp, &policy, GradientForm::NextValue).unwrap();
        let b = objective_and_gradient_with(&mdp, &policy, GradientForm::Advantage).unwrap();
        for i in 0..2 {
            for (x, y) in a.agent_vector(i).iter().zip(b.agent_vector(i)) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn tabular_td_fixed_point_is_the_value_function() {
    for seed in 0..20 {
        let n_states = 2 + (seed as usize % 4);
        let (mdp, pf, params) = random_case(seed, n_states, &[2, 2], Sharing::Split, 1.0);
        let policy = SoftmaxPolicy::new(&pf, &params);
        let features = FeatureMap::tabular(&mdp);
        let td = td_fixed_point(&mdp, &policy, &features).unwrap();
        let v = solve_value(&mdp, &policy).unwrap();
        assert!((&td.omega - &v).amax() < 1e-9);
        assert!(td.residual() < 1e-9);
        assert!(td.min_sym_eigenvalue > 0.0);
    }
}

#[test]
fn symmetric_part_of_td_matrix_is_positive_definite() {
    for seed in 0..30 {
        let (mdp, pf, params) = random_case(seed + 200, 5, &[2, 2], Sharing::Split, 2.0);
        let features = FeatureMap::new(
            random_dense(5, 3, seed),
            FeatureMatrix::Identity(5 * 4),
            5,
            vec![2, 2],
        )
        .unwrap();
        let td = td_fixed_point(&mdp, &SoftmaxPolicy::new(&pf, &params), &features).unwrap();
        assert!(td.min_sym_eigenvalue > 0.0, "seed {seed}: {}", td.min_sym_eigenvalue);
        assert!(td.residual() < 1e-9);
    }
}

#[test]
fn constant_value_feature_minimizes_projected_bellman_error() {
    let p = [[0.8, 0.2], [0.35, 0.65]];
    let rewards = [1.0, 0.25];
    let gamma = 0.9;
    let mdp = chain_mdp(p, rewards, gamma, [0.5, 0.5]);
    let (pf, params) = trivial_policy();
    let features = FeatureMap::new(
        FeatureMatrix::Dense(DMatrix::from_element(2, 1, 1.0)),
        FeatureMatrix::Identity(2),
        2,
        vec![1],
    )
    .unwrap();
    let td = td_fixed_point(&mdp, &SoftmaxPolicy::new(&pf, &params), &features).unwrap();
    let mu = two_state_stationary(p);
    let closed = (mu[0] * rewards[0] + mu[1] * rewards[1]) / (1.0 - gamma);
    assert_abs_diff_eq!(td.omega[0], closed, epsilon = 1e-10);

    // With a constant feature the projected Bellman error reduces to a
    // scalar objective in omega.
    let msbe = |w: f64| -> f64 {
        (0..2)
            .map(|s| {
                let next: f64 = (0..2).map(|t| p[s][t] * w).sum();
                mu[s] * (rewards[s] + gamma * next - w).powi(2)
            })
            .sum()
    };
    let step = 1e-4;
    let best = (0..=100_000)
        .map(|k| k as f64 * step)
        .min_by(|a, b| msbe(*a).total_cmp(&msbe(*b)))
        .unwrap();
    assert!((best - td.omega[0]).abs() <= step);
}

#[test]
fn tabular_reward_fit_interpolates_on_support() {
    for seed in 0..5 {
        let (mdp, pf, params) = random_case(seed, 3, &[2, 2], Sharing::Split, 1.0);
        let features = FeatureMap::tabular(&mdp);
        let lambda = reward_fit(&mdp, &SoftmaxPolicy::new(&pf, &params), &features).unwrap();
        for s in 0..3 {
            for j in 0..4 {
                let pred = features.varphi(s, j)[features.reward_row_index(s, j)] * lambda[features.reward_row_index(s, j)];
                assert_abs_diff_eq!(pred, mdp.mean_reward_index(s, j), epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn constant_reward_is_fit_exactly_by_a_constant_feature() {
    let c = 0.7;
    let mdp = MultiAgentMdp::new(
        2,
        vec![2],
        vec![0.5, 0.5, 0.2, 0.8, 0.9, 0.1, 0.4, 0.6],
        vec![c; 4],
        vec![1.0, 0.0],
        0.9,
        1.0,
    )
    .unwrap();
    let pf = TablePolicyFeatures::one_hot(2, &[2], Sharing::Personal);
    let params = PolicyParams::zeros(&pf, 1);
    let psi = DMatrix::from_fn(4, 2, |r, col| if col == 0 { 0.5 } else { 0.1 * r as f64 });
    let features =
        FeatureMap::new(FeatureMatrix::Identity(2), FeatureMatrix::Dense(psi), 2, vec![2]).unwrap();
    let policy = SoftmaxPolicy::new(&pf, &params);
    let lambda = reward_fit(&mdp, &policy, &features).unwrap();
    assert_abs_diff_eq!(lambda[0], c / 0.5, epsilon = 1e-10);
    assert_abs_diff_eq!(lambda[1], 0.0, epsilon = 1e-10);
    let err = approximation_error(&mdp, &policy, &features).unwrap();
    assert!(err.reward_term < 1e-9);
}

#[test]
fn reward_fit_matches_grid_search() {
    let (mdp, pf, params) = random_case(17, 2, &[2, 2], Sharing::Split, 1.0);
    let psi = match random_dense(8, 2, 5) {
        FeatureMatrix::Dense(m) => m,
        _ => unreachable!(),
    };
    let features =
        FeatureMap::new(FeatureMatrix::Identity(2), FeatureMatrix::Dense(psi.clone()), 2, vec![2, 2])
            .unwrap();
    let policy = SoftmaxPolicy::new(&pf, &params);
    let lambda = reward_fit(&mdp, &policy, &features).unwrap();
    let mu = stationary_distribution_for(&mdp, &policy).unwrap();
    let joint = policy.joint_table(2);
    let weights: Vec<(f64, f64, f64, f64)> = (0..2)
        .flat_map(|s| (0..4).map(move |j| (s, j)))
        .map(|(s, j)| {
            let row = s * 4 + j;
            (mu[s] * joint[s][j], psi[(row, 0)], psi[(row, 1)], mdp.mean_reward_index(s, j))
        })
        .collect();
    let loss = |a: f64, b: f64| -> f64 {
        weights.iter().map(|(w, p0, p1, r)| w * (r - p0 * a - p1 * b).powi(2)).sum()
    };
    let step = 0.005;
    let half = 1200;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for ia in -half..=half {
        for ib in -half..=half {
            let (a, b) = (ia as f64 * step, ib as f64 * step);
            let l = loss(a, b);
            if l < best.0 {
                best = (l, a, b);
            }
        }
    }
    assert!(loss(lambda[0], lambda[1]) <= best.0 + 1e-15);
    assert!((best.1 - lambda[0]).abs() <= step && (best.2 - lambda[1]).abs() <= step,
        "grid ({}, {}) vs fit ({}, {})", best.1, best.2, lambda[0], lambda[1]);
}

#[test]
fn tabular_features_have_zero_approximation_error() {
    for seed in 0..5 {
        let (mdp, pf, params) = random_case(seed, 4, &[2, 2], Sharing::Split, 1.0);
        let features = FeatureMap::tabular(&mdp);
        let err = approximation_error(&mdp, &SoftmaxPolicy::new(&pf, &params), &features).unwrap();
        assert!(err.total() < 1e-9);
    }
}

#[test]
fn constant_value_feature_error_is_weighted_spread_of_values() {
    for seed in 0..5 {
        let (mdp, pf, params) = random_case(seed + 30, 4, &[2], Sharing::Personal, 1.0);
        let policy = SoftmaxPolicy::new(&pf, &params);
        let features = FeatureMap::new(
            FeatureMatrix::Dense(DMatrix::from_element(4, 1, 1.0)),
            FeatureMatrix::Identity(8),
            4,
            vec![2],
        )
        .unwrap();
        let err = approximation_error(&mdp, &policy, &features).unwrap();
        let mu = stationary_distribution_for(&mdp, &policy).unwrap();
        let v = solve_value(&mdp, &policy).unwrap();
        let mean = mu.dot(&v);
        let sd = mu.iter().zip(v.iter()).map(|(m, x)| m * (x - mean).powi(2)).sum::<f64>().sqrt();
        assert!(err.value_term > 0.0);
        assert_abs_diff_eq!(err.value_term, sd, epsilon = 1e-10);
    }
}

#[test]
fn value_term_is_never_below_the_best_weighted_fit() {
    for seed in 0..40 {
        let (mdp, pf, params) = random_case(seed + 400, 5, &[2], Sharing::Personal, 1.0);
        let policy = SoftmaxPolicy::new(&pf, &params);
        let phi = random_dense(5, 2, seed + 7);
        let dense = phi.to_dense();
        let features = FeatureMap::new(phi, FeatureMatrix::Identity(10), 5, vec![2]).unwrap();
        let err = approximation_error(&mdp, &policy, &features).unwrap();
        let mu = stationary_distribution_for(&mdp, &policy).unwrap();
        let v = solve_value(&mdp, &policy).unwrap();
        let d = DMatrix::from_diagonal(&mu);
        let gram = dense.transpose() * &d * &dense;
        let w = gram.cholesky().unwrap().solve(&(dense.transpose() * &d * &v));
        let resid = &v - &dense * w;
        let best = mu.iter().zip(resid.iter()).map(|(m, r)| m * r * r).sum::<f64>().sqrt();
        assert!(err.value_term >= best - 1e-12);
    }
}

#[test]
fn mismatch_is_zero_for_single_state_and_stationary_start() {
    let mdp = MultiAgentMdp::new(1, vec![2], vec![1.0, 1.0], vec![0.3, 0.9], vec![1.0], 0.9, 1.0).unwrap();
    let pf = TablePolicyFeatures::one_hot(1, &[2], Sharing::Personal);
    let params = PolicyParams::zeros(&pf, 1);
    assert_eq!(tv_mismatch(&mdp, &SoftmaxPolicy::new(&pf, &params)).unwrap(), 0.0);

    let (mdp, pf, params) = random_case(8, 4, &[2, 2], Sharing::Split, 1.0);
    let policy = SoftmaxPolicy::new(&pf, &params);
    let mu = stationary_distribution_for(&mdp, &policy).unwrap();
    let mdp = mdp.with_initial_dist(mu.iter().copied().collect()).unwrap();
    assert!(tv_mismatch(&mdp, &policy).unwrap() < 1e-10);
}

#[test]
fn two_state_mismatch_matches_closed_form() {
    let p = [[0.9, 0.1], [0.5, 0.5]];
    let gamma = 0.8;
    let mdp = chain_mdp(p, [0.0, 1.0], gamma, [1.0, 0.0]);
    let (pf, params) = trivial_policy();
    let mu = two_state_stationary(p);
    assert_abs_diff_eq!(mu[0], 5.0 / 6.0, epsilon = 1e-15);
    let d = two_state_visitation(p, gamma, [1.0, 0.0]);
    let expected = 0.5 * ((mu[0] - d[0]).abs() + (mu[1] - d[1]).abs());
    let got = tv_mismatch(&mdp, &SoftmaxPolicy::new(&pf, &params)).unwrap();
    assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
    // frozen value of the closed form: d = (1 - 0.8) (I - 0.8 P^T)^{-1} (1, 0)
    assert_abs_diff_eq!(got, 5.0 / 102.0, epsilon = 1e-12);
}

#[test]
fn optimal_values_move_boundedly_with_policy_parameters() {
    let (mdp, pf, _) = random_case(21, 4, &[2, 2], Sharing::Split, 1.0);
    let features =
        FeatureMap::new(random_dense(4, 2, 3), FeatureMatrix::Identity(16), 4, vec![2, 2]).unwrap();
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let a = PolicyParams::gaussian(&pf, 2, 1.0, &mut r);
        let b = PolicyParams::gaussian(&pf, 2, 1.0, &mut r);
        let wa = td_fixed_point(&mdp, &SoftmaxPolicy::new(&pf, &a), &features).unwrap().omega;
        let wb = td_fixed_point(&mdp, &SoftmaxPolicy::new(&pf, &b), &features).unwrap().omega;
        let dtheta: f64 = all_params(&a)
            .iter()
            .zip(all_params(&b))
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        worst = worst.max((wa - wb).norm() / dtheta);
    }
    assert!(worst.is_finite() && worst < 1e3, "ratio {worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distributions_are_stationary_and_normalized(seed in 0u64..10_000, n in 1usize..6) {
        let (mdp, pf, params) = random_case(seed, n, &[2, 2], Sharing::Split, 2.0);
        let policy = SoftmaxPolicy::new(&pf, &params);
        let induced = Induced::new(&mdp, &policy).unwrap();
        let mu = stationary_distribution_for(&mdp, &policy).unwrap();
        let d = visitation(&mdp, &policy).unwrap();
        let moved = induced.chain.transpose() * &mu;
        prop_assert!((moved - &mu).amax() < 1e-10);
        prop_assert!((mu.sum() - 1.0).abs() < 1e-10);
        prop_assert!((d.sum() - 1.0).abs() < 1e-10);
        prop_assert!(d.iter().all(|&x| x >= -1e-15));
    }
}

#[test]
fn visitation_matches_closed_form() {
    let p = [[0.9, 0.1], [0.5, 0.5]];
    let mdp = chain_mdp(p, [0.0, 1.0], 0.6, [0.25, 0.75]);
    let (pf, params) = trivial_policy();
    let d = visitation(&mdp, &SoftmaxPolicy::new(&pf, &params)).unwrap();
    let expected = two_state_visitation(p, 0.6, [0.25, 0.75]);
    assert_abs_diff_eq!(d[0], expected[0], epsilon = 1e-12);
    assert_abs_diff_eq!(d[1], expected[1], epsilon = 1e-12);
    assert_eq!(mdp.n_agents(), 1);
}
