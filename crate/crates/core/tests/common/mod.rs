#![allow(dead_code)]

use cac_core::mdp::MultiAgentMdp;
use cac_core::policy::{PolicyParams, Sharing};
use cac_core::rng::{stream, Rng, Stream};
use cac_core::FeatureMatrix;
use nalgebra::DMatrix;
use rand::Rng as _;

pub use cac_core::policy::TablePolicyFeatures;

pub fn rng(seed: u64) -> Rng {
    stream(seed, Stream::Environment)
}

/// Random model with one-hot policy features and Gaussian parameters.
pub fn random_case(
    seed: u64,
    n_states: usize,
    counts: &[usize],
    sharing: Sharing,
    param_std: f64,
) -> (MultiAgentMdp, TablePolicyFeatures, PolicyParams) {
    let mut r = rng(seed);
    let gamma = r.random_range(0.5..0.95);
    let mdp = MultiAgentMdp::random(n_states, counts.to_vec(), gamma, &mut r).unwrap();
    let pf = TablePolicyFeatures::one_hot(n_states, counts, sharing);
    let params = PolicyParams::gaussian(&pf, counts.len(), param_std, &mut r);
    (mdp, pf, params)
}

/// Single agent with one action: the model is a plain Markov reward process.
pub fn chain_mdp(p: [[f64; 2]; 2], rewards: [f64; 2], gamma: f64, initial: [f64; 2]) -> MultiAgentMdp {
    MultiAgentMdp::new(
        2,
        vec![1],
        vec![p[0][0], p[0][1], p[1][0], p[1][1]],
        rewards.to_vec(),
        initial.to_vec(),
        gamma,
        rewards.iter().fold(0.0f64, |m, r| m.max(r.abs())).max(1.0),
    )
    .unwrap()
}

pub fn trivial_policy() -> (TablePolicyFeatures, PolicyParams) {
    let pf = TablePolicyFeatures::one_hot(2, &[1], Sharing::Personal);
    let params = PolicyParams::zeros(&pf, 1);
    (pf, params)
}

/// Dense features with unit-bounded rows drawn uniformly, rescaled if needed.
pub fn random_dense(rows: usize, cols: usize, seed: u64) -> FeatureMatrix {
    let mut r = rng(seed ^ 0xfeed);
    let mut m = DMatrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0));
    for i in 0..rows {
        let n = m.row(i).norm();
        if n > 1.0 {
            let scaled = m.row(i) / n;
            m.set_row(i, &scaled);
        }
    }
    FeatureMatrix::Dense(m)
}

/// Closed-form stationary distribution of a two-state chain.
pub fn two_state_stationary(p: [[f64; 2]; 2]) -> [f64; 2] {
    let a = p[0][1];
    let b = p[1][0];
    [b / (a + b), a / (a + b)]
}

/// `(1 - gamma) (I - gamma P^T)^{-1} eta` by the explicit 2x2 inverse.
pub fn two_state_visitation(p: [[f64; 2]; 2], gamma: f64, eta: [f64; 2]) -> [f64; 2] {
    let m = [
        [1.0 - gamma * p[0][0], -gamma * p[1][0]],
        [-gamma * p[0][1], 1.0 - gamma * p[1][1]],
    ];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let x0 = (m[1][1] * eta[0] - m[0][1] * eta[1]) / det;
    let x1 = (-m[1][0] * eta[0] + m[0][0] * eta[1]) / det;
    [(1.0 - gamma) * x0, (1.0 - gamma) * x1]
}
