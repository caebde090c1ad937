//! Linear softmax policies with a shared block (mixed by consensus) and a
//! personalized block (kept local).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::mdp::{sample_categorical, JointAction};

/// Per-agent features `f_s(s, a_i)` (shared block) and `f_p(s, a_i)`
/// (personalized block) of a linear softmax policy.
pub trait PolicyFeatures<S>: Sync {
    fn n_agents(&self) -> usize;
    fn n_actions(&self, agent: usize) -> usize;
    fn shared_dim(&self) -> usize;
    fn personal_dim(&self, agent: usize) -> usize;
    fn features(
        &self,
        agent: usize,
        state: &S,
        action: usize,
        shared_out: &mut [f64],
        personal_out: &mut [f64],
    );
    /// Upper bound on the norm of the concatenated feature vector.
    fn feature_bound(&self) -> f64;

    /// Score-function bound `2 * feature_bound`.
    fn score_bound(&self) -> f64 {
        2.0 * self.feature_bound()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sharing {
    /// Everything in the shared block.
    Full,
    /// Everything in the personalized block.
    Personal,
    /// One-hot copies in both blocks, scaled by `1/sqrt(2)`.
    Split,
}

/// One-hot `(state, local action)` indicators for finite MDPs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TablePolicyFeatures {
    n_states: usize,
    action_counts: Vec<usize>,
    sharing: Sharing,
    max_actions: usize,
}

impl TablePolicyFeatures {
    pub fn one_hot(n_states: usize, action_counts: &[usize], sharing: Sharing) -> Self {
        Self {
            n_states,
            action_counts: action_counts.to_vec(),
            sharing,
            max_actions: action_counts.iter().copied().max().unwrap_or(0),
        }
    }

    pub fn sharing(&self) -> Sharing {
        self.sharing
    }

    fn scale(&self) -> f64 {
        match self.sharing {
            Sharing::Split => std::f64::consts::FRAC_1_SQRT_2,
            _ => 1.0,
        }
    }
}

impl PolicyFeatures<usize> for TablePolicyFeatures {
    fn n_agents(&self) -> usize {
        self.action_counts.len()
    }

    fn n_actions(&self, agent: usize) -> usize {
        self.action_counts[agent]
    }

    fn shared_dim(&self) -> usize {
        match self.sharing {
            Sharing::Personal => 0,
            _ => self.n_states * self.max_actions,
        }
    }

    fn personal_dim(&self, agent: usize) -> usize {
        match self.sharing {
            Sharing::Full => 0,
            _ => self.n_states * self.action_counts[agent],
        }
    }

    fn features(
        &self,
        agent: usize,
        state: &usize,
        action: usize,
        shared_out: &mut [f64],
        personal_out: &mut [f64],
    ) {
        shared_out.fill(0.0);
        personal_out.fill(0.0);
        let scale = self.scale();
        if !shared_out.is_empty() {
            shared_out[state * self.max_actions + action] = scale;
        }
        if !personal_out.is_empty() {
            personal_out[state * self.action_counts[agent] + action] = scale;
        }
    }

    fn feature_bound(&self) -> f64 {
        1.0
    }
}

/// Presents any feature source with an empty shared block by moving the
/// shared features to the front of the personalized block. Policies built
/// on the view assign the same logits as the original.
#[derive(Debug, Clone, Copy)]
pub struct PersonalizedView<'a, F: ?Sized> {
    inner: &'a F,
}

impl<'a, F: ?Sized> PersonalizedView<'a, F> {
    pub fn new(inner: &'a F) -> Self {
        Self { inner }
    }
}

impl<S, F: PolicyFeatures<S> + ?Sized> PolicyFeatures<S> for PersonalizedView<'_, F> {
    fn n_agents(&self) -> usize {
        self.inner.n_agents()
    }

    fn n_actions(&self, agent: usize) -> usize {
        self.inner.n_actions(agent)
    }

    fn shared_dim(&self) -> usize {
        0
    }

    fn personal_dim(&self, agent: usize) -> usize {
        self.inner.shared_dim() + self.inner.personal_dim(agent)
    }

    fn features(
        &self,
        agent: usize,
        state: &S,
        action: usize,
        _shared_out: &mut [f64],
        personal_out: &mut [f64],
    ) {
        let (head, tail) = personal_out.split_at_mut(self.inner.shared_dim());
        self.inner.features(agent, state, action, head, tail);
    }

    fn feature_bound(&self) -> f64 {
        self.inner.feature_bound()
    }
}

/// Per-agent parameters. Row `i` of `shared` is agent `i`'s shared block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub shared: DMatrix<f64>,
    pub personal: Vec<DVector<f64>>,
}

impl PolicyParams {
    pub fn zeros<S, F: PolicyFeatures<S> + ?Sized>(features: &F, n_agents: usize) -> Self {
        Self {
            shared: DMatrix::zeros(n_agents, features.shared_dim()),
            personal: (0..n_agents)
                .map(|i| DVector::zeros(features.personal_dim(i)))
                .collect(),
        }
    }

    /// I.i.d. `N(0, std^2)` entries, shared block first, agent by agent.
    pub fn gaussian<S, F: PolicyFeatures<S> + ?Sized, R: Rng + ?Sized>(
        features: &F,
        n_agents: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut params = Self::zeros(features, n_agents);
        if std == 0.0 {
            return params;
        }
        let normal = Normal::new(0.0, std).expect("finite standard deviation");
        for i in 0..n_agents {
            for h in 0..params.shared.ncols() {
                params.shared[(i, h)] = normal.sample(rng);
            }
            for v in params.personal[i].iter_mut() {
                *v = normal.sample(rng);
            }
        }
        params
    }

    pub fn n_agents(&self) -> usize {
        self.personal.len()
    }

    pub fn shared_dim(&self) -> usize {
        self.shared.ncols()
    }

    /// Layout matching [`PersonalizedView`]: `[shared_i, personal_i]` per agent.
    pub fn personalized(&self) -> Self {
        let n = self.n_agents();
        let personal = (0..n)
            .map(|i| {
                let mut v: Vec<f64> = self.shared.row(i).iter().copied().collect();
                v.extend(self.personal[i].iter());
                DVector::from_vec(v)
            })
            .collect();
        Self {
            shared: DMatrix::zeros(n, 0),
            personal,
        }
    }

    /// Agent `i`'s parameters flattened as `[shared, personal]`.
    pub fn agent_vector(&self, agent: usize) -> Vec<f64> {
        let mut v: Vec<f64> = self.shared.row(agent).iter().copied().collect();
        v.extend(self.personal[agent].iter());
        v
    }

    /// Inverse of [`Self::agent_vector`].
    pub fn set_agent_vector(&mut self, agent: usize, values: &[f64]) {
        let h = self.shared_dim();
        assert_eq!(values.len(), h + self.personal[agent].len());
        for k in 0..h {
            self.shared[(agent, k)] = values[k];
        }
        self.personal[agent].copy_from_slice(&values[h..]);
    }

    pub fn all_finite(&self) -> bool {
        self.shared.iter().all(|v| v.is_finite())
            && self.personal.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// Score `grad log pi_i(a | s)`, split into shared and personalized blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub shared: Vec<f64>,
    pub personal: Vec<f64>,
}

impl Score {
    pub fn norm(&self) -> f64 {
        self.shared
            .iter()
            .chain(&self.personal)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Borrowed view pairing features with parameters.
#[derive(Debug, Clone, Copy)]
pub struct SoftmaxPolicy<'a, F: ?Sized> {
    features: &'a F,
    params: &'a PolicyParams,
}

impl<'a, F: ?Sized> SoftmaxPolicy<'a, F> {
    pub fn new(features: &'a F, params: &'a PolicyParams) -> Self {
        Self { features, params }
    }

    pub fn features(&self) -> &'a F {
        self.features
    }

    pub fn params(&self) -> &'a PolicyParams {
        self.params
    }

    pub fn n_agents(&self) -> usize {
        self.params.n_agents()
    }

    fn buffers<S>(&self, agent: usize) -> (Vec<f64>, Vec<f64>)
    where
        F: PolicyFeatures<S>,
    {
        (
            vec![0.0; self.features.shared_dim()],
            vec![0.0; self.features.personal_dim(agent)],
        )
    }

    pub fn logits<S>(&self, agent: usize, state: &S) -> Vec<f64>
    where
        F: PolicyFeatures<S>,
    {
        let (mut fs, mut fp) = self.buffers(agent);
        let shared = self.params.shared.row(agent);
        let personal = &self.params.personal[agent];
        (0..self.features.n_actions(agent))
            .map(|a| {
                self.features.features(agent, state, a, &mut fs, &mut fp);
                let mut l = 0.0;
                for (k, f) in fs.iter().enumerate() {
                    l += f * shared[k];
                }
                for (k, f) in fp.iter().enumerate() {
                    l += f * personal[k];
                }
                l
            })
            .collect()
    }

    pub fn action_probabilities<S>(&self, agent: usize, state: &S) -> Vec<f64>
    where
        F: PolicyFeatures<S>,
    {
        softmax(&self.logits(agent, state))
    }

    pub fn log_prob<S>(&self, agent: usize, state: &S, action: usize) -> f64
    where
        F: PolicyFeatures<S>,
    {
        let logits = self.logits(agent, state);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logits[action] - lse
    }

    pub fn joint_log_prob<S>(&self, state: &S, joint_action: &JointAction) -> f64
    where
        F: PolicyFeatures<S>,
    {
        joint_action
            .actions()
            .iter()
            .enumerate()
            .map(|(i, &a)| self.log_prob(i, state, a))
            .sum()
    }

    pub fn score<S>(&self, agent: usize, state: &S, action: usize) -> Score
    where
        F: PolicyFeatures<S>,
    {
        let probs = self.action_probabilities(agent, state);
        self.score_with_probabilities(agent, state, action, &probs)
    }

    /// `f(s, a) - sum_b pi(b | s) f(s, b)` per block, given `pi(. | s)`.
    pub fn score_with_probabilities<S>(
        &self,
        agent: usize,
        state: &S,
        action: usize,
        probs: &[f64],
    ) -> Score
    where
        F: PolicyFeatures<S>,
    {
        let (mut fs, mut fp) = self.buffers(agent);
        let mut shared = vec![0.0; fs.len()];
        let mut personal = vec![0.0; fp.len()];
        for (b, &p) in probs.iter().enumerate() {
            self.features.features(agent, state, b, &mut fs, &mut fp);
            let w = if b == action { 1.0 - p } else { -p };
            if w == 0.0 {
                continue;
            }
            for (acc, f) in shared.iter_mut().zip(&fs) {
                *acc += w * f;
            }
            for (acc, f) in personal.iter_mut().zip(&fp) {
                *acc += w * f;
            }
        }
        Score { shared, personal }
    }

    pub fn sample_joint_action<S, R: Rng + ?Sized>(&self, state: &S, rng: &mut R) -> JointAction
    where
        F: PolicyFeatures<S>,
    {
        JointAction::new(
            (0..self.n_agents())
                .map(|i| sample_categorical(&self.action_probabilities(i, state), rng))
                .collect(),
        )
    }

    /// Product of the local distributions over all joint actions at `state`,
    /// in the mixed-radix order of [`JointAction::encode`].
    pub fn joint_distribution<S>(&self, state: &S) -> Vec<f64>
    where
        F: PolicyFeatures<S>,
    {
        let mut joint = vec![1.0];
        for i in 0..self.n_agents() {
            let local = self.action_probabilities(i, state);
            joint = joint
                .iter()
                .flat_map(|&p| local.iter().map(move |&q| p * q))
                .collect();
        }
        joint
    }

    /// `table[s][j] = pi(j | s)` for states `0..n_states`.
    pub fn joint_table(&self, n_states: usize) -> Vec<Vec<f64>>
    where
        F: PolicyFeatures<usize>,
    {
        (0..n_states).map(|s| self.joint_distribution(&s)).collect()
    }
}
