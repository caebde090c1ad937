//! Single-state coordination game with eight actions per agent.
//!
//! Agent `i` receives `(a_i - 3.5)^2 + #{j != i : a_j = a_i}`, optionally
//! plus standard Gumbel noise. The symmetric optima are everyone playing 0
//! or everyone playing 7.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{CacError, Result};
use crate::features::{FeatureMap, FeatureMatrix};
use crate::mdp::{Environment, JointAction, MultiAgentMdp, Transition};
use crate::policy::{Sharing, TablePolicyFeatures};

pub const N_ACTIONS: usize = 8;
/// Euler-Mascheroni constant, the mean of a standard Gumbel variable.
pub const GUMBEL_MEAN: f64 = 0.577_215_664_901_532_9;
/// Largest supported team; the dense tensors hold `8^N` joint actions.
pub const MAX_AGENTS: usize = 6;

const CENTER: f64 = 3.5;
const EDGE_PAYOFF: f64 = CENTER * CENTER;

/// Inverse-CDF transform `-ln(-ln u)` for `u` in `(0, 1)`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Standard Gumbel draw; `u` is sampled from the open interval.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return gumbel_from_uniform(u);
        }
    }
}

/// Noise-free payoff of `agent` under `actions`.
pub fn deterministic_reward(agent: usize, actions: &[usize]) -> f64 {
    let own = actions[agent];
    let matches = actions
        .iter()
        .enumerate()
        .filter(|&(j, &a)| j != agent && a == own)
        .count();
    (own as f64 - CENTER).powi(2) + matches as f64
}

#[derive(Debug, Clone)]
pub struct CoordinationGame {
    n_agents: usize,
    noise: bool,
    mdp: MultiAgentMdp,
}

impl CoordinationGame {
    pub fn new(n_agents: usize, noise: bool, discount: f64) -> Result<Self> {
        if n_agents == 0 || n_agents > MAX_AGENTS {
            return Err(CacError::InvalidModel(format!(
                "coordination game supports 1 to {MAX_AGENTS} agents, got {n_agents}"
            )));
        }
        let counts = vec![N_ACTIONS; n_agents];
        let n_joint = N_ACTIONS.pow(n_agents as u32);
        let mut rewards = vec![0.0; n_agents * n_joint];
        for j in 0..n_joint {
            let a = JointAction::decode(j, &counts);
            for i in 0..n_agents {
                rewards[i * n_joint + j] = deterministic_reward(i, a.actions());
            }
        }
        let mdp = MultiAgentMdp::new(
            1,
            counts,
            vec![1.0; n_joint],
            rewards,
            vec![1.0],
            discount,
            Self::max_reward_for(n_agents),
        )?;
        Ok(Self {
            n_agents,
            noise,
            mdp,
        })
    }

    /// `12.25 + (N - 1)`, attained when everyone plays 0 or everyone plays 7.
    pub fn max_reward_for(n_agents: usize) -> f64 {
        EDGE_PAYOFF + (n_agents as f64 - 1.0)
    }

    pub fn max_reward(&self) -> f64 {
        Self::max_reward_for(self.n_agents)
    }

    pub fn noise(&self) -> bool {
        self.noise
    }

    /// Model with noise-free rewards.
    pub fn mdp(&self) -> &MultiAgentMdp {
        &self.mdp
    }

    /// Model with expected rewards: shifted by the Gumbel mean when noise
    /// is on.
    pub fn oracle_mdp(&self) -> MultiAgentMdp {
        if self.noise {
            self.mdp.with_reward_offset(GUMBEL_MEAN)
        } else {
            self.mdp.clone()
        }
    }

    /// Constant value feature; reward features
    /// `c [1, mean_i (a_i - 3.5)^2 / 12.25, mean_i matches_i / (N - 1)]`
    /// (the last column only for `N > 1`) with `c` normalizing to unit norm.
    /// The team-average reward is exactly linear in these.
    pub fn features(&self) -> FeatureMap {
        let n = self.n_agents;
        let counts = vec![N_ACTIONS; n];
        let n_joint = self.mdp.n_joint_actions();
        let cols = if n > 1 { 3 } else { 2 };
        let scale = 1.0 / (cols as f64).sqrt();
        let mut psi = DMatrix::zeros(n_joint, cols);
        for j in 0..n_joint {
            let a = JointAction::decode(j, &counts);
            let acts = a.actions();
            let edge = acts
                .iter()
                .map(|&x| (x as f64 - CENTER).powi(2) / EDGE_PAYOFF)
                .sum::<f64>()
                / n as f64;
            psi[(j, 0)] = scale;
            psi[(j, 1)] = scale * edge;
            if n > 1 {
                let matches = (0..n)
                    .map(|i| deterministic_reward(i, acts) - (acts[i] as f64 - CENTER).powi(2))
                    .sum::<f64>()
                    / (n as f64 * (n as f64 - 1.0));
                psi[(j, 2)] = scale * matches;
            }
        }
        FeatureMap::new(
            FeatureMatrix::Identity(1),
            FeatureMatrix::Dense(psi),
            1,
            counts,
        )
        .expect("coordination features are bounded and full rank")
    }

    pub fn policy_features(&self, sharing: Sharing) -> TablePolicyFeatures {
        TablePolicyFeatures::one_hot(1, &vec![N_ACTIONS; self.n_agents], sharing)
    }
}

impl Environment for CoordinationGame {
    type State = usize;

    fn n_agents(&self) -> usize {
        self.n_agents
    }

    fn action_counts(&self) -> &[usize] {
        self.mdp.action_counts()
    }

    fn discount(&self) -> f64 {
        self.mdp.discount()
    }

    fn reward_bound(&self) -> f64 {
        self.mdp.reward_bound()
    }

    fn initial_state<R: Rng + ?Sized>(&self, _rng: &mut R) -> usize {
        0
    }

    fn step<R: Rng + ?Sized>(
        &self,
        _state: &usize,
        joint_action: &JointAction,
        _rng: &mut R,
        noise_rng: &mut R,
    ) -> Transition<usize> {
        let mut rewards: Vec<f64> = (0..self.n_agents)
            .map(|i| deterministic_reward(i, joint_action.actions()))
            .collect();
        let mean_reward = rewards.iter().sum::<f64>() / self.n_agents as f64;
        if self.noise {
            rewards.iter_mut().for_each(|r| *r += sample_gumbel(noise_rng));
        }
        Transition {
            state: 0,
            joint_action: joint_action.clone(),
            next_state: 0,
            rewards,
            mean_reward,
        }
    }

    fn as_finite(&self) -> Option<&MultiAgentMdp> {
        Some(&self.mdp)
    }

    fn state_from_index(&self, index: usize) -> Option<usize> {
        (index == 0).then_some(0)
    }
}
