//! Exact quantities for a fixed policy on a small finite model.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CacError, Result};
use crate::features::{FeatureMap, FeatureMatrix};
use crate::mdp::{JointAction, MultiAgentMdp};
use crate::policy::{PolicyFeatures, SoftmaxPolicy};

/// Largest `|S| * |A| * |S|` the enumerating solvers accept.
pub const ENUMERATION_CAP: usize = 50_000_000;
const POWER_TOL: f64 = 1e-12;
const POWER_MAX_ITERS: usize = 10_000_000;
const RESIDUAL_TOL: f64 = 1e-10;

pub fn check_enumeration(mdp: &MultiAgentMdp) -> Result<()> {
    let size = mdp
        .n_states()
        .saturating_mul(mdp.n_joint_actions())
        .saturating_mul(mdp.n_states());
    if size > ENUMERATION_CAP {
        return Err(CacError::EnumerationTooLarge {
            size,
            cap: ENUMERATION_CAP,
        });
    }
    Ok(())
}

fn reachable(chain: &DMatrix<f64>, from: usize, transpose: bool) -> Vec<bool> {
    let n = chain.nrows();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([from]);
    seen[from] = true;
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            let p = if transpose { chain[(v, u)] } else { chain[(u, v)] };
            if p > 0.0 && !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    seen
}

/// Errors with a witness unless every state reaches every other.
pub fn check_irreducible(chain: &DMatrix<f64>) -> Result<()> {
    if chain.nrows() == 0 {
        return Ok(());
    }
    if let Some(v) = reachable(chain, 0, false).iter().position(|r| !r) {
        return Err(CacError::Reducible {
            from: 0,
            unreachable: v,
        });
    }
    if let Some(v) = reachable(chain, 0, true).iter().position(|r| !r) {
        return Err(CacError::Reducible {
            from: v,
            unreachable: 0,
        });
    }
    Ok(())
}

/// Period of an irreducible chain (1 means aperiodic).
pub fn period(chain: &DMatrix<f64>) -> usize {
    let n = chain.nrows();
    if n == 0 {
        return 1;
    }
    let mut level = vec![usize::MAX; n];
    level[0] = 0;
    let mut queue = VecDeque::from([0usize]);
    let mut g = 0usize;
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            if chain[(u, v)] <= 0.0 {
                continue;
            }
            if level[v] == usize::MAX {
                level[v] = level[u] + 1;
                queue.push_back(v);
            } else {
                let diff = (level[u] + 1).abs_diff(level[v]);
                g = gcd(g, diff);
            }
        }
    }
    g.max(1)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Solves `mu P = mu`, `sum mu = 1` for an irreducible chain.
pub fn stationary_distribution(chain: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_irreducible(chain)?;
    let n = chain.nrows();
    let mut system = chain.transpose() - DMatrix::identity(n, n);
    let mut rhs = DVector::zeros(n);
    system.row_mut(n - 1).fill(1.0);
    rhs[n - 1] = 1.0;
    if let Some(mu) = system.lu().solve(&rhs) {
        if stationary_residual(chain, &mu) < RESIDUAL_TOL && mu.iter().all(|&p| p > -1e-14) {
            return Ok(mu.map(|p| p.max(0.0)));
        }
    }
    power_iteration(chain)
}

/// Lazy power iteration, which also converges on periodic chains.
fn power_iteration(chain: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = chain.nrows();
    let lazy = (chain + DMatrix::identity(n, n)) * 0.5;
    let lazy_t = lazy.transpose();
    let mut mu = DVector::from_element(n, 1.0 / n as f64);
    for _ in 0..POWER_MAX_ITERS {
        let next = &lazy_t * &mu;
        let delta = (&next - &mu).abs().sum();
        mu = next;
        if delta < POWER_TOL {
            let total = mu.sum();
            return Ok(mu / total);
        }
    }
    Err(CacError::Singular("stationary distribution did not converge"))
}

/// `max_s |(mu P)(s) - mu(s)|`.
pub fn stationary_residual(chain: &DMatrix<f64>, mu: &DVector<f64>) -> f64 {
    (chain.transpose() * mu - mu).amax()
}

/// `(1 - gamma) (I - gamma P^T)^{-1} eta`.
pub fn visitation_from_chain(chain: &DMatrix<f64>, initial: &[f64], discount: f64) -> Result<DVector<f64>> {
    let n = chain.nrows();
    let system = DMatrix::identity(n, n) - chain.transpose() * discount;
    let eta = DVector::from_column_slice(initial);
    system
        .lu()
        .solve(&eta)
        .map(|d| d * (1.0 - discount))
        .ok_or(CacError::Singular("visitation system"))
}

/// Joint policy table and induced chain for one policy, computed once.
#[derive(Debug, Clone)]
pub struct Induced {
    pub joint: Vec<Vec<f64>>,
    pub chain: DMatrix<f64>,
    pub reward: DVector<f64>,
}

impl Induced {
    pub fn new<F: PolicyFeatures<usize> + ?Sized>(
        mdp: &MultiAgentMdp,
        policy: &SoftmaxPolicy<'_, F>,
    ) -> Result<Self> {
        check_enumeration(mdp)?;
        let joint = policy.joint_table(mdp.n_states());
        let (chain, reward) = mdp.induced_chain(&joint);
        Ok(Self {
            joint,
            chain,
            reward,
        })
    }
}

pub fn stationary_distribution_for<F: PolicyFeatures<usize> + ?Sized>(
    mdp: &MultiAgentMdp,
    policy: &SoftmaxPolicy<'_, F>,
) -> Result<DVector<f64>> {
    stationary_distribution(&Induced::new(mdp, policy)?.chain)
}

pub fn visitation<F: PolicyFeatures<usize> + ?Sized>(
    mdp: &MultiAgentMdp,
    policy: &SoftmaxPolicy<'_, F>,
) -> Result<DVector<f64>> {
    let induced = Induced::new(mdp, policy)?;
    visitation_from_chain(&induced.chain, mdp.initial_dist(), mdp.discount())
}

fn value_from(induced: &Induced, discount: f64) -> Result<DVector<f64>> {
    let n = induced.chain.nrows();
    let system = DMatrix::identity(n, n) - &induced.chain * discount;
    system
        .lu()
        .solve(&induced.reward)
        .ok_or(CacError::Singular("Bellman system"))
}

/// `V = (I - gamma P_pi)^{-1} r_pi`.
pub fn solve_value<F: PolicyFeatures<usize> + ?Sized>(
    mdp: &MultiAgentMdp,
    policy: &SoftmaxPolicy<'_, F>,
) -> Result<DVector<f64>> {
    value_from(&Induced::new(mdp, policy)?, mdp.discount())
}

/// Gradient of `J` per agent and block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyGradient {
    pub objective: f64,
    /// Row `i` holds the derivative with respect to agent `i`'s shared block.
    pub shared: Vec<Vec<f64>>,
    pub personal: Vec<Vec<f64>>,
}

impl PolicyGradient {
    /// `N || (1/N) sum_i grad_shared_i ||^2`.
    pub fn shared_consensus_norm_sq(&self) -> f64 {
        let n = self.shared.len();
        if n == 0 || self.shared[0].is_empty() {
            return 0.0;
        }
        let h = self.shared[0].len();
        let mean_sq: f64 = (0..h)
            .map(|k| {
                let m = self.shared.iter().map(|g| g[k]).sum::<f64>() / n as f64;
                m * m
            })
            .sum();
        n as f64 * mean_sq
    }

    /// `sum_i || grad_personal_i ||^2`.
    pub fn personal_norm_sq(&self) -> f64 {
        self.personal.iter().flatten().map(|v| v * v).sum()
    }

    /// Agent `i`'s gradient flattened as `[shared, personal]`.
    pub fn agent_vector(&self, agent: usize) -> Vec<f64> {
        let mut v = self.shared[agent].clone();
        v.extend(&self.personal[agent]);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientForm {
    /// `(1/(1-gamma)) E_{d, pi, P}[(r + gamma V(s')) grad log pi]`.
    NextValue,
    /// `(1/(1-gamma)) E_{d, pi}[(Q(s, a) - V(s)) grad log pi]`.
    Advantage,
}

pub fn objective_and_gradient<F: PolicyFeatures<usize> + ?Sized>(
    mdp: &MultiAgentMdp,
    policy: &SoftmaxPolicy<'_, F>,
) -> Result<PolicyGradient> {
    objective_and_gradient_with(mdp, policy, GradientForm::NextValue)
}

pub fn objective_and_gradient_with<F: PolicyFeatures<usize> + ?Sized>(
    mdp: &MultiAgentMdp,
    policy: &SoftmaxPolicy<'_, F>,
    form: GradientForm,
) -> Result<PolicyGradient> {
    let induced = Induced::new(mdp, policy)?;
    let gamma = mdp.discount();
    let value = value_from(&induced, gamma)?;
    let d = visitation_from_chain(&induced.chain, mdp.initial_dist(), gamma)?;
    let objective = DVector::from_column_slice(mdp.initial_dist()).dot(&value);
    Ok(gradient_from(mdp, policy, &induced, &value, &d, form, objective))
}

fn gradient_from<F: PolicyFeatures<usize> + ?Sized>(
    mdp: &MultiAgentMdp,
    policy: &SoftmaxPolicy<'_, F>,
    induced: &Induced,
    value: &DVector<f64>,
    visitation: &DVector<f64>,
    form: GradientForm,
    objective: f64,
) -> PolicyGradient {
    let gamma = mdp.discount();
    let counts = mdp.action_counts();
    let n_agents = counts.len();
    let features = policy.features();
    let mut shared = vec![vec![0.0; features.shared_dim()]; n_agents];
    let mut personal: Vec<Vec<f64>> = (0..n_agents)
        .map(|i| vec![0.0; features.personal_dim(i)])
        .collect();
    for s in 0..mdp.n_states() {
        // weight[i][a_i] = sum over joint actions with agent i playing a_i of
        // pi(j | s) * signal(s, j)
        let mut weight: Vec<Vec<f64>> = counts.iter().map(|&c| vec![0.0; c]).collect();
        for (j, &p) in induced.joint[s].iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let signal = match form {
                GradientForm::NextValue => mdp
                    .transition_row(s, j)
                    .iter()
                    .enumerate()
                    .map(|(next, &q)| q * (mdp.mean_reward_index(s, j) + gamma * value[next]))
                    .sum::<f64>(),
                GradientForm::Advantage => {
                    let q: f64 = mdp.mean_reward_index(s, j)
                        + gamma
                            * mdp
                                .transition_row(s, j)
                                .iter()
                                .enumerate()
                                .map(|(next, &q)| q * value[next])
                                .sum::<f64>();
                    q - value[s]
                }
            };
            let a = JointAction::decode(j, counts);
            for (i, &ai) in a.actions().iter().enumerate() {
                weight[i][ai] += p * signal;
            }
        }
        let scale = visitation[s] / (1.0 - gamma);
        for i in 0..n_agents {
            let probs = policy.action_probabilities(i, &s);
            for (ai, &w) in weight[i].iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let score = policy.score_with_probabilities(i, &s, ai, &probs);
                for (g, v) in shared[i].iter_mut().zip(&score.shared) {
                    *g += scale * w * v;
                }
                for (g, v) in personal[i].iter_mut().zip(&score.personal) {
                    *g += scale * w * v;
                }
            }
        }
    }
    PolicyGradient {
        objective,
        shared,
        personal,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdFixedPoint {
    pub matrix_a: DMatrix<f64>,
    pub vector_b: DVector<f64>,
    pub omega: DVector<f64>,
    /// Smallest eigenvalue of `(A + A^T) / 2`.
    pub min_sym_eigenvalue: f64,
}

impl TdFixedPoint {
    pub fn residual(&self) -> f64 {
        (&self.matrix_a * &self.omega - &self.vector_b).norm()
    }
}

fn td_from(
    features: &FeatureMap,
    induced: &Induced,
    mu: &DVector<f64>,
    discount: f64,
) -> Result<TdFixedPoint> {
    features.check_rank()?;
    let phi = features.value_matrix().to_dense();
    let weighted = DMatrix::from_diagonal(mu) * &phi;
    let next = &phi - (&induced.chain * &phi) * discount;
    let matrix_a = weighted.transpose() * next;
    let vector_b = weighted.transpose() * &induced.reward;
    let omega = matrix_a
        .clone()
        .lu()
        .solve(&vector_b)
        .ok_or(CacError::Singular("TD fixed point"))?;
    let sym = (&matrix_a + matrix_a.transpose()) * 0.5;
    let min_sym_eigenvalue = sym.symmetric_eigenvalues().min();
    Ok(TdFixedPoint {
        matrix_a,
        vector_b,
        omega,
        min_sym_eigenvalue,
    })
}

/// `A = E_mu[phi(s) (phi(s) - gamma phi(s'))^T]`, `b = E_mu[r_pi(s) phi(s)]`
/// and the solution of `A omega = b`.
pub fn td_fixed_point<F: PolicyFeatures<usize> + ?Sized>(
    mdp: &MultiAgentMdp,
    policy: &SoftmaxPolicy<'_, F>,
    features: &FeatureMap,
) -> Result<TdFixedPoint> {
    let induced = Induced::new(mdp, policy)?;
    let mu = stationary_distribution(&induced.chain)?;
    td_from(features, &induced, &mu, mdp.discount())
}

fn reward_fit_from(
    mdp: &MultiAgentMdp,
    features: &FeatureMap,
    induced: &Induced,
    mu: &DVector<f64>,
) -> Result<DVector<f64>> {
    features.check_rank()?;
    let nj = mdp.n_joint_actions();
    match features.reward_matrix() {
        FeatureMatrix::Identity(l) => {
            let mut lambda = DVector::zeros(*l);
            for s in 0..mdp.n_states() {
                for j in 0..nj {
                    if mu[s] * induced.joint[s][j] > 0.0 {
                        lambda[s * nj + j] = mdp.mean_reward_index(s, j);
                    }
                }
            }
            Ok(lambda)
        }
        FeatureMatrix::Dense(psi) => {
            let l = psi.ncols();
            let mut gram = DMatrix::zeros(l, l);
            let mut rhs = DVector::zeros(l);
            for s in 0..mdp.n_states() {
                for j in 0..nj {
                    let w = mu[s] * induced.joint[s][j];
                    if w == 0.0 {
                        continue;
                    }
                    let row = psi.row(s * nj + j).transpose();
                    gram += &row * row.transpose() * w;
                    rhs += &row * (w * mdp.mean_reward_index(s, j));
                }
            }
            gram.cholesky()
                .map(|c| c.solve(&rhs))
                .ok_or(CacError::Singular("reward regression normal equations"))
        }
    }
}

/// `argmin_lambda E_{mu, pi}[(r(s, a) - varphi(s, a)^T lambda)^2]`.
pub fn reward_fit<F: PolicyFeatures<usize> + ?Sized>(
    mdp: &MultiAgentMdp,
    policy: &SoftmaxPolicy<'_, F>,
    features: &FeatureMap,
) -> Result<DVector<f64>> {
    let induced = Induced::new(mdp, policy)?;
    let mu = stationary_distribution(&induced.chain)?;
    reward_fit_from(mdp, features, &induced, &mu)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproximationError {
    /// `sqrt(E_mu[(V - phi^T omega*)^2])`
    pub value_term: f64,
    /// `sqrt(E_{mu, pi}[(r - varphi^T lambda*)^2])`
    pub reward_term: f64,
}

impl ApproximationError {
    pub fn total(&self) -> f64 {
        self.value_term + self.reward_term
    }
}

fn approximation_from(
    mdp: &MultiAgentMdp,
    features: &FeatureMap,
    induced: &Induced,
    mu: &DVector<f64>,
    value: &DVector<f64>,
    omega: &DVector<f64>,
    lambda: &DVector<f64>,
) -> ApproximationError {
    let phi = features.value_matrix();
    let mut value_sq = 0.0;
    for s in 0..mdp.n_states() {
        let pred: f64 = phi.row(s).iter().zip(omega.iter()).map(|(a, b)| a * b).sum();
        value_sq += mu[s] * (value[s] - pred).powi(2);
    }
    let nj = mdp.n_joint_actions();
    let psi = features.reward_matrix();
    let mut reward_sq = 0.0;
    for s in 0..mdp.n_states() {
        for j in 0..nj {
            let w = mu[s] * induced.joint[s][j];
            if w == 0.0 {
                continue;
            }
            let pred: f64 = psi
                .row(s * nj + j)
                .iter()
                .zip(lambda.iter())
                .map(|(a, b)| a * b)
                .sum();
            reward_sq += w * (mdp.mean_reward_index(s, j) - pred).powi(2);
        }
    }
    ApproximationError {
        value_term: value_sq.max(0.0).sqrt(),
        reward_term: reward_sq.max(0.0).sqrt(),
    }
}

pub fn approximation_error<F: PolicyFeatures<usize> + ?Sized>(
    mdp: &MultiAgentMdp,
    policy: &SoftmaxPolicy<'_, F>,
    features: &FeatureMap,
) -> Result<ApproximationError> {
    let induced = Induced::new(mdp, policy)?;
    let mu = stationary_distribution(&induced.chain)?;
    let value = value_from(&induced, mdp.discount())?;
    let td = td_from(features, &induced, &mu, mdp.discount())?;
    let lambda = reward_fit_from(mdp, features, &induced, &mu)?;
    Ok(approximation_from(
        mdp, features, &induced, &mu, &value, &td.omega, &lambda,
    ))
}

fn total_variation(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    0.5 * (a - b).abs().sum()
}

/// `(1/2) sum_s |mu(s) - d(s)|`.
pub fn tv_mismatch<F: PolicyFeatures<usize> + ?Sized>(
    mdp: &MultiAgentMdp,
    policy: &SoftmaxPolicy<'_, F>,
) -> Result<f64> {
    let induced = Induced::new(mdp, policy)?;
    let mu = stationary_distribution(&induced.chain)?;
    let d = visitation_from_chain(&induced.chain, mdp.initial_dist(), mdp.discount())?;
    Ok(total_variation(&mu, &d))
}

/// Everything the oracle knows about one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub stationary: Vec<f64>,
    pub visitation: Vec<f64>,
    pub value: Vec<f64>,
    pub objective: f64,
    pub gradient: PolicyGradient,
    pub td_fixed_point: Vec<f64>,
    pub reward_fit: Vec<f64>,
    pub matrix_a: Vec<Vec<f64>>,
    pub vector_b: Vec<f64>,
    pub min_sym_eigenvalue: f64,
    pub approximation: ApproximationError,
    pub eps_app: f64,
    pub tv_mismatch: f64,
}

impl OracleSolution {
    pub fn compute<F: PolicyFeatures<usize> + ?Sized>(
        mdp: &MultiAgentMdp,
        policy: &SoftmaxPolicy<'_, F>,
        features: &FeatureMap,
    ) -> Result<Self> {
        let induced = Induced::new(mdp, policy)?;
        let gamma = mdp.discount();
        let mu = stationary_distribution(&induced.chain)?;
        let d = visitation_from_chain(&induced.chain, mdp.initial_dist(), gamma)?;
        let value = value_from(&induced, gamma)?;
        let objective = DVector::from_column_slice(mdp.initial_dist()).dot(&value);
        let gradient = gradient_from(mdp, policy, &induced, &value, &d, GradientForm::NextValue, objective);
        let td = td_from(features, &induced, &mu, gamma)?;
        let lambda = reward_fit_from(mdp, features, &induced, &mu)?;
        let approximation =
            approximation_from(mdp, features, &induced, &mu, &value, &td.omega, &lambda);
        let to_vec = |v: &DVector<f64>| v.iter().copied().collect::<Vec<_>>();
        Ok(Self {
            stationary: to_vec(&mu),
            visitation: to_vec(&d),
            value: to_vec(&value),
            objective,
            gradient,
            td_fixed_point: to_vec(&td.omega),
            reward_fit: to_vec(&lambda),
            matrix_a: (0..td.matrix_a.nrows())
                .map(|r| td.matrix_a.row(r).iter().copied().collect())
                .collect(),
            vector_b: to_vec(&td.vector_b),
            min_sym_eigenvalue: td.min_sym_eigenvalue,
            approximation,
            eps_app: approximation.total(),
            tv_mismatch: total_variation(&mu, &d),
        })
    }
}
