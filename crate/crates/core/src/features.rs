//! Linear value and reward approximation.
//!
//! `V(s; omega) = phi(s)^T omega` and `r(s, a; lambda) = varphi(s, a)^T lambda`.
//! Feature vectors must have Euclidean norm at most one and the stacked
//! feature matrices must have full column rank.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CacError, Result};
use crate::mdp::{JointAction, MultiAgentMdp, Transition};

/// Slack allowed on the unit-norm bound for floating-point round-off.
const NORM_SLACK: f64 = 1e-12;
/// Relative singular-value threshold for the full-column-rank test.
pub const RANK_TOL: f64 = 1e-10;

/// Feature source for the critic and reward estimator.
pub trait LinearFeatures<S>: Sync {
    fn value_dim(&self) -> usize;
    fn reward_dim(&self) -> usize;
    fn value_features(&self, state: &S, out: &mut [f64]);
    fn reward_features(&self, state: &S, joint_action: &JointAction, out: &mut [f64]);
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureMatrix {
    /// Unit basis vectors, one column per row index.
    Identity(usize),
    Dense(DMatrix<f64>),
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        match self {
            Self::Identity(n) => *n,
            Self::Dense(m) => m.nrows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            Self::Identity(n) => *n,
            Self::Dense(m) => m.ncols(),
        }
    }

    pub fn row_into(&self, row: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.cols());
        match self {
            Self::Identity(_) => {
                out.fill(0.0);
                out[row] = 1.0;
            }
            Self::Dense(m) => {
                for (k, slot) in out.iter_mut().enumerate() {
                    *slot = m[(row, k)];
                }
            }
        }
    }

    pub fn row(&self, row: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.cols()];
        self.row_into(row, &mut out);
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Self::Identity(n) => DMatrix::identity(*n, *n),
            Self::Dense(m) => m.clone(),
        }
    }

    /// First row whose norm exceeds one, with that norm.
    pub fn norm_violation(&self) -> Option<(usize, f64)> {
        match self {
            Self::Identity(_) => None,
            Self::Dense(m) => (0..m.nrows())
                .map(|r| (r, m.row(r).norm()))
                .find(|&(_, n)| n > 1.0 + NORM_SLACK),
        }
    }

    /// `(smallest, largest)` singular values.
    pub fn singular_range(&self) -> (f64, f64) {
        match self {
            Self::Identity(_) => (1.0, 1.0),
            Self::Dense(m) => {
                if m.ncols() == 0 {
                    return (1.0, 1.0);
                }
                if m.nrows() < m.ncols() {
                    return (0.0, m.clone().svd(false, false).singular_values.max());
                }
                let sv = m.clone().svd(false, false).singular_values;
                (sv.min(), sv.max())
            }
        }
    }

    pub fn has_full_column_rank(&self) -> bool {
        let (lo, hi) = self.singular_range();
        hi > 0.0 && lo > RANK_TOL * hi
    }
}

/// Value features `Phi` (one row per state) and reward features `Psi` (one
/// row per `(state, joint action)`, row index `s * |A| + joint`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    value: FeatureMatrix,
    reward: FeatureMatrix,
    n_states: usize,
    action_counts: Vec<usize>,
}

impl FeatureMap {
    /// Checked constructor: shapes, unit-norm bound and full column rank.
    pub fn new(
        value: FeatureMatrix,
        reward: FeatureMatrix,
        n_states: usize,
        action_counts: Vec<usize>,
    ) -> Result<Self> {
        let map = Self::from_parts(value, reward, n_states, action_counts)?;
        map.check_norms()?;
        map.check_rank()?;
        Ok(map)
    }

    /// Shape-checked only; used by preflight to report assumption
    /// violations instead of refusing to build.
    pub fn from_parts(
        value: FeatureMatrix,
        reward: FeatureMatrix,
        n_states: usize,
        action_counts: Vec<usize>,
    ) -> Result<Self> {
        let n_joint: usize = action_counts.iter().product();
        if value.rows() != n_states {
            return Err(CacError::Dimension {
                context: "value feature rows",
                expected: n_states,
                actual: value.rows(),
            });
        }
        if reward.rows() != n_states * n_joint {
            return Err(CacError::Dimension {
                context: "reward feature rows",
                expected: n_states * n_joint,
                actual: reward.rows(),
            });
        }
        Ok(Self {
            value,
            reward,
            n_states,
            action_counts,
        })
    }

    /// Identity features for both the value function and the reward.
    pub fn tabular(mdp: &MultiAgentMdp) -> Self {
        Self {
            value: FeatureMatrix::Identity(mdp.n_states()),
            reward: FeatureMatrix::Identity(mdp.n_states() * mdp.n_joint_actions()),
            n_states: mdp.n_states(),
            action_counts: mdp.action_counts().to_vec(),
        }
    }

    pub fn value_matrix(&self) -> &FeatureMatrix {
        &self.value
    }

    pub fn reward_matrix(&self) -> &FeatureMatrix {
        &self.reward
    }

    pub fn n_joint_actions(&self) -> usize {
        self.action_counts.iter().product()
    }

    pub fn reward_row_index(&self, state: usize, joint: usize) -> usize {
        state * self.n_joint_actions() + joint
    }

    pub fn phi(&self, state: usize) -> Vec<f64> {
        self.value.row(state)
    }

    pub fn varphi(&self, state: usize, joint: usize) -> Vec<f64> {
        self.reward.row(self.reward_row_index(state, joint))
    }

    pub fn check_norms(&self) -> Result<()> {
        if let Some((s, n)) = self.value.norm_violation() {
            return Err(CacError::FeatureNorm {
                location: format!("value features of state {s}"),
                norm: n,
            });
        }
        if let Some((row, n)) = self.reward.norm_violation() {
            let nj = self.n_joint_actions();
            return Err(CacError::FeatureNorm {
                location: format!(
                    "reward features of state {}, joint action {}",
                    row / nj,
                    row % nj
                ),
                norm: n,
            });
        }
        Ok(())
    }

    pub fn check_rank(&self) -> Result<()> {
        for (which, m) in [("value", &self.value), ("reward", &self.reward)] {
            if !m.has_full_column_rank() {
                let (smallest, largest) = m.singular_range();
                return Err(CacError::RankDeficient {
                    which,
                    smallest,
                    largest,
                });
            }
        }
        Ok(())
    }
}

impl LinearFeatures<usize> for FeatureMap {
    fn value_dim(&self) -> usize {
        self.value.cols()
    }

    fn reward_dim(&self) -> usize {
        self.reward.cols()
    }

    fn value_features(&self, state: &usize, out: &mut [f64]) {
        self.value.row_into(*state, out);
    }

    fn reward_features(&self, state: &usize, joint_action: &JointAction, out: &mut [f64]) {
        let j = joint_action.encode(&self.action_counts);
        self.reward.row_into(self.reward_row_index(*state, j), out);
    }
}

/// Per-agent critic (`omega`, one row per agent) and reward-estimator
/// (`lambda`) weights with their projection radii.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticState {
    pub omega: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub radius_omega: f64,
    pub radius_lambda: f64,
}

impl CriticState {
    pub fn zeros(
        n_agents: usize,
        value_dim: usize,
        reward_dim: usize,
        radius_omega: f64,
        radius_lambda: f64,
    ) -> Result<Self> {
        if !(radius_omega > 0.0) {
            return Err(CacError::InvalidRadius(radius_omega));
        }
        if !(radius_lambda > 0.0) {
            return Err(CacError::InvalidRadius(radius_lambda));
        }
        Ok(Self {
            omega: DMatrix::zeros(n_agents, value_dim),
            lambda: DMatrix::zeros(n_agents, reward_dim),
            radius_omega,
            radius_lambda,
        })
    }

    /// `2 R_max / (1 - gamma)`: contains the sup-norm of any value function.
    pub fn default_radius(reward_bound: f64, discount: f64) -> f64 {
        2.0 * reward_bound / (1.0 - discount)
    }

    pub fn n_agents(&self) -> usize {
        self.omega.nrows()
    }

    pub fn omega_row(&self, agent: usize) -> Vec<f64> {
        self.omega.row(agent).iter().copied().collect()
    }

    pub fn lambda_row(&self, agent: usize) -> Vec<f64> {
        self.lambda.row(agent).iter().copied().collect()
    }

    pub fn within_radii(&self) -> bool {
        (0..self.n_agents()).all(|i| {
            self.omega.row(i).norm() <= self.radius_omega + NORM_SLACK
                && self.lambda.row(i).norm() <= self.radius_lambda + NORM_SLACK
        })
    }
}

pub fn predict_value<S, F: LinearFeatures<S> + ?Sized>(features: &F, omega: &[f64], state: &S) -> f64 {
    assert_eq!(omega.len(), features.value_dim(), "omega dimension");
    let mut phi = vec![0.0; omega.len()];
    features.value_features(state, &mut phi);
    dot(&phi, omega)
}

pub fn predict_reward<S, F: LinearFeatures<S> + ?Sized>(
    features: &F,
    lambda: &[f64],
    state: &S,
    joint_action: &JointAction,
) -> f64 {
    assert_eq!(lambda.len(), features.reward_dim(), "lambda dimension");
    let mut psi = vec![0.0; lambda.len()];
    features.reward_features(state, joint_action, &mut psi);
    dot(&psi, lambda)
}

/// Local TD error `r + gamma phi(s')^T omega - phi(s)^T omega`.
pub fn td_error<S, F: LinearFeatures<S> + ?Sized>(
    features: &F,
    omega: &[f64],
    sample: &Transition<S>,
    local_reward: f64,
    discount: f64,
) -> f64 {
    local_reward + discount * predict_value(features, omega, &sample.next_state)
        - predict_value(features, omega, &sample.state)
}

/// TD error with the estimated team reward `varphi(s, a)^T lambda` in
/// place of the observed local reward. This is the actor's signal.
pub fn actor_td_error<S, F: LinearFeatures<S> + ?Sized>(
    features: &F,
    omega: &[f64],
    lambda: &[f64],
    sample: &Transition<S>,
    discount: f64,
) -> f64 {
    predict_reward(features, lambda, &sample.state, &sample.joint_action)
        + discount * predict_value(features, omega, &sample.next_state)
        - predict_value(features, omega, &sample.state)
}

/// Euclidean projection onto the ball of the given radius.
pub fn project(x: &[f64], radius: f64) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    project_in_place(&mut out, radius)?;
    Ok(out)
}

pub fn project_in_place(x: &mut [f64], radius: f64) -> Result<()> {
    if !(radius > 0.0) {
        return Err(CacError::InvalidRadius(radius));
    }
    let n = norm(x);
    if n > radius {
        let scale = radius / n;
        x.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(())
}

/// `C_delta = R_lambda + (1 + gamma) R_omega`, the bound on `|actor_td_error|`
/// when both weight vectors respect their radii.
pub fn actor_td_bound(radius_omega: f64, radius_lambda: f64, discount: f64) -> f64 {
    radius_lambda + (1.0 + discount) * radius_omega
}
