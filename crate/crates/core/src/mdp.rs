//! Finite multi-agent MDPs and the environment interface the learners drive.
//!
//! Joint actions are flattened with a mixed-radix code, agent 0 most
//! significant: for action counts `(A_0, .., A_{N-1})` the joint action
//! `(a_0, .., a_{N-1})` has index `((a_0 * A_1 + a_1) * A_2 + a_2) ...`.
//! Transition and reward tensors are stored densely in that order.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CacError, Result};

const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointAction(pub Vec<usize>);

impl JointAction {
    pub fn new(actions: Vec<usize>) -> Self {
        Self(actions)
    }

    pub fn actions(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Mixed-radix index, agent 0 most significant.
    pub fn encode(&self, action_counts: &[usize]) -> usize {
        debug_assert_eq!(self.0.len(), action_counts.len());
        self.0
            .iter()
            .zip(action_counts)
            .fold(0, |acc, (&a, &n)| {
                assert!(a < n, "action {a} out of range for {n} actions");
                acc * n + a
            })
    }

    pub fn decode(mut index: usize, action_counts: &[usize]) -> Self {
        let mut actions = vec![0; action_counts.len()];
        for (slot, &n) in actions.iter_mut().zip(action_counts).rev() {
            *slot = index % n;
            index /= n;
        }
        Self(actions)
    }
}

/// One observed transition. `rewards` are what the agents see (including any
/// environment noise); `mean_reward` is the noise-free team average.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<S> {
    pub state: S,
    pub joint_action: JointAction,
    pub next_state: S,
    pub rewards: Vec<f64>,
    pub mean_reward: f64,
}

pub type TransitionSample = Transition<usize>;

/// Anything the learners can interact with.
///
/// `rng` drives the dynamics; `noise_rng` is reserved for reward noise so
/// that noisy and noise-free variants of an environment share trajectories.
pub trait Environment: Sync {
    type State: Clone + Send + Sync + std::fmt::Debug + PartialEq;

    fn n_agents(&self) -> usize;
    fn action_counts(&self) -> &[usize];
    fn discount(&self) -> f64;
    fn reward_bound(&self) -> f64;

    fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Self::State;

    fn step<R: Rng + ?Sized>(
        &self,
        state: &Self::State,
        joint_action: &JointAction,
        rng: &mut R,
        noise_rng: &mut R,
    ) -> Transition<Self::State>;

    /// Dense model, when one exists. Needed for exact stationary sampling
    /// and for the oracles.
    fn as_finite(&self) -> Option<&MultiAgentMdp> {
        None
    }

    fn state_from_index(&self, _index: usize) -> Option<Self::State> {
        None
    }
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiAgentMdp {
    n_states: usize,
    action_counts: Vec<usize>,
    n_joint: usize,
    /// `[state][joint][next_state]`
    transition: Vec<f64>,
    /// `[agent][state][joint]`
    rewards: Vec<f64>,
    initial_dist: Vec<f64>,
    discount: f64,
    reward_bound: f64,
}

impl MultiAgentMdp {
    pub fn new(
        n_states: usize,
        action_counts: Vec<usize>,
        transition: Vec<f64>,
        rewards: Vec<f64>,
        initial_dist: Vec<f64>,
        discount: f64,
        reward_bound: f64,
    ) -> Result<Self> {
        if n_states == 0 || action_counts.is_empty() || action_counts.contains(&0) {
            return Err(CacError::InvalidModel(
                "need at least one state, one agent and one action per agent".into(),
            ));
        }
        let n_joint: usize = action_counts.iter().product();
        let n_agents = action_counts.len();
        check_len("transition tensor", n_states * n_joint * n_states, transition.len())?;
        check_len("reward tensor", n_agents * n_states * n_joint, rewards.len())?;
        check_len("initial distribution", n_states, initial_dist.len())?;
        if !(discount > 0.0 && discount < 1.0) {
            return Err(CacError::InvalidModel(format!(
                "discount must lie in (0, 1), got {discount}"
            )));
        }
        for (row_idx, row) in transition.chunks(n_states).enumerate() {
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(CacError::InvalidModel(format!(
                    "negative transition probability in row {row_idx}"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_TOL {
                return Err(CacError::InvalidModel(format!(
                    "transition row (state {}, joint action {}) sums to {sum}",
                    row_idx / n_joint,
                    row_idx % n_joint
                )));
            }
        }
        if initial_dist.iter().any(|&p| p < 0.0)
            || (initial_dist.iter().sum::<f64>() - 1.0).abs() > PROB_TOL
        {
            return Err(CacError::InvalidModel(
                "initial distribution is not a probability vector".into(),
            ));
        }
        if let Some(pos) = rewards.iter().position(|r| !(r.abs() <= reward_bound)) {
            let agent = pos / (n_states * n_joint);
            let rem = pos % (n_states * n_joint);
            return Err(CacError::InvalidModel(format!(
                "reward {} of agent {agent} at state {}, joint action {} exceeds bound {reward_bound}",
                rewards[pos],
                rem / n_joint,
                rem % n_joint
            )));
        }
        Ok(Self {
            n_states,
            action_counts,
            n_joint,
            transition,
            rewards,
            initial_dist,
            discount,
            reward_bound,
        })
    }

    /// Random model for tests and sweeps: Dirichlet(1) transition rows,
    /// uniform `[0, 1)` rewards, uniform initial distribution.
    pub fn random<R: Rng + ?Sized>(
        n_states: usize,
        action_counts: Vec<usize>,
        discount: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let n_joint: usize = action_counts.iter().product();
        let n_agents = action_counts.len();
        let mut transition = Vec::with_capacity(n_states * n_joint * n_states);
        for _ in 0..n_states * n_joint {
            let raw: Vec<f64> = (0..n_states)
                .map(|_| -(1.0 - rng.random::<f64>()).ln())
                .collect();
            let total: f64 = raw.iter().sum();
            let mut row: Vec<f64> = raw.iter().map(|x| x / total).collect();
            // push the rounding residue into the largest entry so rows sum to 1
            let residue = 1.0 - row.iter().sum::<f64>();
            let argmax = (0..n_states)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap_or(0);
            row[argmax] += residue;
            transition.extend(row);
        }
        let rewards = (0..n_agents * n_states * n_joint)
            .map(|_| rng.random::<f64>())
            .collect();
        let initial_dist = vec![1.0 / n_states as f64; n_states];
        Self::new(
            n_states,
            action_counts,
            transition,
            rewards,
            initial_dist,
            discount,
            1.0,
        )
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_agents(&self) -> usize {
        self.action_counts.len()
    }

    pub fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }

    pub fn n_joint_actions(&self) -> usize {
        self.n_joint
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn reward_bound(&self) -> f64 {
        self.reward_bound
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn transition_row(&self, state: usize, joint: usize) -> &[f64] {
        assert!(state < self.n_states && joint < self.n_joint);
        let start = (state * self.n_joint + joint) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn reward(&self, agent: usize, state: usize, joint: usize) -> f64 {
        assert!(agent < self.n_agents() && state < self.n_states && joint < self.n_joint);
        self.rewards[(agent * self.n_states + state) * self.n_joint + joint]
    }

    /// Team-average reward `(1/N) sum_i r_i(s, a)`.
    pub fn mean_reward(&self, state: usize, joint_action: &JointAction) -> f64 {
        self.mean_reward_index(state, joint_action.encode(&self.action_counts))
    }

    pub fn mean_reward_index(&self, state: usize, joint: usize) -> f64 {
        let n = self.n_agents();
        (0..n).map(|i| self.reward(i, state, joint)).sum::<f64>() / n as f64
    }

    /// Copy of the model with every reward shifted by `offset` (used to fold
    /// a known noise mean into oracle computations).
    pub fn with_reward_offset(&self, offset: f64) -> Self {
        let mut out = self.clone();
        out.rewards.iter_mut().for_each(|r| *r += offset);
        out.reward_bound += offset.abs();
        out
    }

    pub fn with_initial_dist(&self, initial_dist: Vec<f64>) -> Result<Self> {
        Self::new(
            self.n_states,
            self.action_counts.clone(),
            self.transition.clone(),
            self.rewards.clone(),
            initial_dist,
            self.discount,
            self.reward_bound,
        )
    }

    pub fn step<R: Rng + ?Sized>(
        &self,
        state: usize,
        joint_action: &JointAction,
        rng: &mut R,
    ) -> TransitionSample {
        assert!(state < self.n_states, "state {state} out of range");
        assert_eq!(joint_action.len(), self.n_agents(), "joint action length");
        let joint = joint_action.encode(&self.action_counts);
        let next_state = sample_categorical(self.transition_row(state, joint), rng);
        let rewards: Vec<f64> = (0..self.n_agents())
            .map(|i| self.reward(i, state, joint))
            .collect();
        let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
        Transition {
            state,
            joint_action: joint_action.clone(),
            next_state,
            rewards,
            mean_reward,
        }
    }

    /// State chain and mean-reward vector induced by a joint policy, given as
    /// `joint_policy[s][j] = pi(j | s)` over flattened joint actions.
    pub fn induced_chain(&self, joint_policy: &[Vec<f64>]) -> (DMatrix<f64>, DVector<f64>) {
        assert_eq!(joint_policy.len(), self.n_states);
        let n = self.n_states;
        let mut chain = DMatrix::zeros(n, n);
        let mut reward = DVector::zeros(n);
        for (s, probs) in joint_policy.iter().enumerate() {
            assert_eq!(probs.len(), self.n_joint);
            for (j, &p) in probs.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let row = self.transition_row(s, j);
                for (next, &q) in row.iter().enumerate() {
                    chain[(s, next)] += p * q;
                }
                reward[s] += p * self.mean_reward_index(s, j);
            }
        }
        (chain, reward)
    }
}

fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(CacError::Dimension {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

impl Environment for MultiAgentMdp {
    type State = usize;

    fn n_agents(&self) -> usize {
        self.action_counts.len()
    }

    fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }

    fn discount(&self) -> f64 {
        self.discount
    }

    fn reward_bound(&self) -> f64 {
        self.reward_bound
    }

    fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.initial_dist, rng)
    }

    fn step<R: Rng + ?Sized>(
        &self,
        state: &usize,
        joint_action: &JointAction,
        rng: &mut R,
        _noise_rng: &mut R,
    ) -> TransitionSample {
        MultiAgentMdp::step(self, *state, joint_action, rng)
    }

    fn as_finite(&self) -> Option<&MultiAgentMdp> {
        Some(self)
    }

    fn state_from_index(&self, index: usize) -> Option<usize> {
        (index < self.n_states).then_some(index)
    }
}
