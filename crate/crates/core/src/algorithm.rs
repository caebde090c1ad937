//! The coordinated actor-critic iteration and its baselines.
//!
//! Each iteration draws a transition, mixes `omega`, `lambda` and the shared
//! policy block with the current weight matrix, takes projected TD and
//! reward-regression steps, and moves the policy along
//! `actor_td_error * score` evaluated at the pre-update critic.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Geometric, Normal};

use crate::error::{CacError, Result};
use crate::features::{
    actor_td_error, dot, project_in_place, td_error, CriticState, FeatureMap, LinearFeatures,
};
use crate::mdp::{sample_categorical, Environment, MultiAgentMdp, Transition};
use crate::network::{
    consensus_apply, disagreement_norm_sq, verify_connectivity, GraphSchedule, WeightMatrix,
    WeightRule,
};
use crate::oracle::{self, OracleSolution, PolicyGradient};
use crate::policy::{PolicyFeatures, PolicyParams, Score, SoftmaxPolicy};
use crate::rng::{stream, RunRngs, Stream};

/// `alpha = alpha0 / T^sigma1`, `beta = beta0 / T^sigma2`,
/// `zeta = zeta0 / T^sigma2`, held fixed over a run of horizon `T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepsizeSchedule {
    pub alpha0: f64,
    pub beta0: f64,
    pub zeta0: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

impl StepsizeSchedule {
    pub fn new(alpha0: f64, beta0: f64, zeta0: f64, sigma1: f64, sigma2: f64) -> Result<Self> {
        let s = Self {
            alpha0,
            beta0,
            zeta0,
            sigma1,
            sigma2,
        };
        s.validate()?;
        Ok(s)
    }

    /// `sigma1 = 0.6`, `sigma2 = 0.4`, unit bases.
    pub fn two_timescale() -> Self {
        Self {
            alpha0: 1.0,
            beta0: 1.0,
            zeta0: 1.0,
            sigma1: 0.6,
            sigma2: 0.4,
        }
    }

    pub fn with_bases(self, alpha0: f64, beta0: f64, zeta0: f64) -> Result<Self> {
        Self::new(alpha0, beta0, zeta0, self.sigma1, self.sigma2)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha0", self.alpha0), ("beta0", self.beta0), ("zeta0", self.zeta0)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CacError::InvalidStepsize(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        if !(0.0 < self.sigma2 && self.sigma2 < self.sigma1 && self.sigma1 < 1.0) {
            return Err(CacError::InvalidStepsize(format!(
                "need 0 < sigma2 < sigma1 < 1, got sigma1 = {}, sigma2 = {}",
                self.sigma1, self.sigma2
            )));
        }
        Ok(())
    }

    /// `(alpha, beta, zeta)` for horizon `T` (at least 1).
    pub fn rates(&self, horizon: usize) -> (f64, f64, f64) {
        let t = horizon.max(1) as f64;
        (
            self.alpha0 / t.powf(self.sigma1),
            self.beta0 / t.powf(self.sigma2),
            self.zeta0 / t.powf(self.sigma2),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stepsizes {
    Constant { alpha: f64, beta: f64, zeta: f64 },
    Polynomial(StepsizeSchedule),
}

impl Stepsizes {
    pub fn two_timescale() -> Self {
        Self::Polynomial(StepsizeSchedule::two_timescale())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Constant { alpha, beta, zeta } => {
                for (name, v) in [("alpha", alpha), ("beta", beta), ("zeta", zeta)] {
                    if !(*v >= 0.0 && v.is_finite()) {
                        return Err(CacError::InvalidStepsize(format!("{name} = {v} must be finite and non-negative")));
                    }
                }
                Ok(())
            }
            Self::Polynomial(s) => s.validate(),
        }
    }

    pub fn rates(&self, horizon: usize) -> (f64, f64, f64) {
        match self {
            Self::Constant { alpha, beta, zeta } => (*alpha, *beta, *zeta),
            Self::Polynomial(s) => s.rates(horizon),
        }
    }

    /// `(beta0, zeta0, sigma2)` as used by the consensus-error bound.
    pub fn critic_bases(&self) -> (f64, f64, f64) {
        match self {
            Self::Constant { beta, zeta, .. } => (*beta, *zeta, 0.0),
            Self::Polynomial(s) => (s.beta0, s.zeta0, s.sigma2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Consensus on `omega`, `lambda` and the shared policy block.
    Cac,
    /// No shared policy block.
    CacNps,
    /// No communication at all; each actor follows its own local TD error.
    Iac,
    /// Critic consensus once, then `batch` critic steps on fresh samples
    /// before each actor step.
    Mdac { batch: usize },
}

impl Variant {
    pub fn requires_personal_only(self) -> bool {
        matches!(self, Self::CacNps | Self::Mdac { .. })
    }

    pub fn batch(self) -> usize {
        match self {
            Self::Mdac { batch } => batch,
            _ => 1,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Cac => write!(f, "cac"),
            Self::CacNps => write!(f, "cac-nps"),
            Self::Iac => write!(f, "iac"),
            Self::Mdac { batch } => write!(f, "mdac:{batch}"),
        }
    }
}

impl FromStr for Variant {
    type Err = CacError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "cac" => Ok(Self::Cac),
            "cac-nps" | "cac_nps" | "dac" => Ok(Self::CacNps),
            "iac" => Ok(Self::Iac),
            "mdac" => Ok(Self::Mdac { batch: 5 }),
            other => {
                if let Some(b) = other.strip_prefix("mdac:").or_else(|| other.strip_prefix("mdac(")) {
                    let b = b.trim_end_matches(')');
                    let batch: usize = b
                        .parse()
                        .map_err(|_| CacError::InvalidModel(format!("bad MDAC batch size in {s:?}")))?;
                    if batch == 0 {
                        return Err(CacError::InvalidModel("MDAC batch size must be at least 1".into()));
                    }
                    return Ok(Self::Mdac { batch });
                }
                Err(CacError::InvalidModel(format!(
                    "unknown variant {s:?} (expected cac, cac-nps, iac or mdac:<batch>)"
                )))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingMode {
    /// Continue a single trajectory.
    #[default]
    Chain,
    /// Draw every state afresh from the current stationary distribution.
    Exact,
}

impl FromStr for SamplingMode {
    type Err = CacError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "chain" => Ok(Self::Chain),
            "exact" => Ok(Self::Exact),
            other => Err(CacError::InvalidModel(format!(
                "unknown sampling mode {other:?} (expected chain or exact)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmConfig {
    pub variant: Variant,
    pub sampling: SamplingMode,
    /// Draw the actor's transition from the discounted visitation measure.
    pub double_sampling: bool,
    pub stepsizes: Stepsizes,
    pub horizon: usize,
    pub weight_rule: WeightRule,
    /// Record every `stride`-th iteration; `None` picks `max(1, T / 10^4)`.
    pub metrics_stride: Option<usize>,
    /// Standard deviation of the Gaussian policy initialization; 0 gives zeros.
    pub policy_init_std: f64,
    pub critic_init_std: f64,
    pub radius_omega: Option<f64>,
    pub radius_lambda: Option<f64>,
}

impl AlgorithmConfig {
    pub fn new(variant: Variant, stepsizes: Stepsizes, horizon: usize) -> Self {
        Self {
            variant,
            sampling: SamplingMode::Chain,
            double_sampling: false,
            stepsizes,
            horizon,
            weight_rule: WeightRule::Metropolis,
            metrics_stride: None,
            policy_init_std: 0.01,
            critic_init_std: 0.0,
            radius_omega: None,
            radius_lambda: None,
        }
    }

    pub fn stride(&self) -> usize {
        self.metrics_stride
            .unwrap_or_else(|| (self.horizon / 10_000).max(1))
            .max(1)
    }
}

/// Everything a single run owns.
#[derive(Debug, Clone)]
pub struct RunState<S> {
    pub policy: PolicyParams,
    pub critic: CriticState,
    pub current_state: S,
    pub iteration: usize,
    pub rngs: RunRngs,
    pub reward_sum: f64,
    stationary_cache: Option<(PolicyParams, Vec<f64>)>,
}

/// Quantities an attached oracle supplies for the current policy.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTargets {
    pub omega_star: DVector<f64>,
    pub lambda_star: DVector<f64>,
    pub gradient: PolicyGradient,
    pub eps_app: f64,
    pub tv_mismatch: f64,
}

pub trait OracleHook: Sync {
    fn targets(&self, params: &PolicyParams) -> Result<OracleTargets>;
}

/// Oracle for finite models with [`FeatureMap`] features.
pub struct FiniteOracle<'a, P: ?Sized> {
    pub mdp: &'a MultiAgentMdp,
    pub features: &'a FeatureMap,
    pub policy_features: &'a P,
}

impl<P: PolicyFeatures<usize> + ?Sized> OracleHook for FiniteOracle<'_, P> {
    fn targets(&self, params: &PolicyParams) -> Result<OracleTargets> {
        let policy = SoftmaxPolicy::new(self.policy_features, params);
        let sol = OracleSolution::compute(self.mdp, &policy, self.features)?;
        Ok(OracleTargets {
            omega_star: DVector::from_vec(sol.td_fixed_point),
            lambda_star: DVector::from_vec(sol.reward_fit),
            gradient: sol.gradient,
            eps_app: sol.eps_app,
            tv_mismatch: sol.tv_mismatch,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub iteration: usize,
    /// Noise-free team-average reward of this iteration's sample(s).
    pub instant_reward: f64,
    pub running_avg_reward: f64,
    pub consensus_theta: f64,
    pub consensus_omega: f64,
    pub consensus_lambda: f64,
    pub critic_gap: Option<f64>,
    pub reward_gap: Option<f64>,
    pub grad_shared: Option<f64>,
    pub grad_personal: Option<f64>,
    pub eps_app: Option<f64>,
    pub tv_mismatch: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome<S> {
    pub records: Vec<MetricsRecord>,
    pub final_state: RunState<S>,
}

/// `delta * phi(s)` with the local TD error.
pub fn critic_increment<S, L: LinearFeatures<S> + ?Sized>(
    features: &L,
    omega: &[f64],
    sample: &Transition<S>,
    reward: f64,
    discount: f64,
) -> Vec<f64> {
    let delta = td_error(features, omega, sample, reward, discount);
    let mut phi = vec![0.0; features.value_dim()];
    features.value_features(&sample.state, &mut phi);
    phi.iter_mut().for_each(|v| *v *= delta);
    phi
}

/// `(r - varphi^T lambda) varphi`.
pub fn reward_increment<S, L: LinearFeatures<S> + ?Sized>(
    features: &L,
    lambda: &[f64],
    sample: &Transition<S>,
    reward: f64,
) -> Vec<f64> {
    let mut psi = vec![0.0; features.reward_dim()];
    features.reward_features(&sample.state, &sample.joint_action, &mut psi);
    let resid = reward - dot(&psi, lambda);
    psi.iter_mut().for_each(|v| *v *= resid);
    psi
}

/// `actor_td_error * grad log pi_i(a_i | s)`.
pub fn actor_increment<S, L, P>(
    features: &L,
    policy: &SoftmaxPolicy<'_, P>,
    agent: usize,
    omega: &[f64],
    lambda: &[f64],
    sample: &Transition<S>,
    discount: f64,
) -> Score
where
    L: LinearFeatures<S> + ?Sized,
    P: PolicyFeatures<S> + ?Sized,
{
    let delta = actor_td_error(features, omega, lambda, sample, discount);
    scaled_score(policy, agent, sample, delta)
}

fn scaled_score<S, P: PolicyFeatures<S> + ?Sized>(
    policy: &SoftmaxPolicy<'_, P>,
    agent: usize,
    sample: &Transition<S>,
    scale: f64,
) -> Score {
    let mut score = policy.score(agent, &sample.state, sample.joint_action.actions()[agent]);
    score.shared.iter_mut().for_each(|v| *v *= scale);
    score.personal.iter_mut().for_each(|v| *v *= scale);
    score
}

/// Stationary distribution of the chain a policy induces on a finite
/// environment, indexed like [`Environment::state_from_index`].
pub fn stationary_for<E, P>(env: &E, policy_features: &P, params: &PolicyParams) -> Result<Vec<f64>>
where
    E: Environment,
    P: PolicyFeatures<E::State> + ?Sized,
{
    let mdp = env.as_finite().ok_or(CacError::ExactSamplingUnsupported)?;
    let policy = SoftmaxPolicy::new(policy_features, params);
    let joint: Vec<Vec<f64>> = (0..mdp.n_states())
        .map(|s| {
            let state = env
                .state_from_index(s)
                .ok_or(CacError::ExactSamplingUnsupported)?;
            Ok(policy.joint_distribution(&state))
        })
        .collect::<Result<_>>()?;
    let (chain, _) = mdp.induced_chain(&joint);
    Ok(oracle::stationary_distribution(&chain)?.iter().copied().collect())
}

/// Draws `k ~ Geometric(1 - gamma)` on `{0, 1, ...}`, starts from the
/// initial distribution and follows the policy for `k` steps. The returned
/// state is distributed according to the discounted visitation measure.
pub fn sample_visitation<E, P, R>(
    env: &E,
    policy: &SoftmaxPolicy<'_, P>,
    rng: &mut R,
    noise_rng: &mut R,
) -> E::State
where
    E: Environment,
    P: PolicyFeatures<E::State> + ?Sized,
    R: Rng + ?Sized,
{
    let gamma = env.discount();
    let horizon = Geometric::new(1.0 - gamma)
        .expect("discount in (0, 1)")
        .sample(rng);
    let mut state = env.initial_state(rng);
    for _ in 0..horizon {
        let a = policy.sample_joint_action(&state, rng);
        state = env.step(&state, &a, rng, noise_rng).next_state;
    }
    state
}

pub struct Learner<'a, E, L: ?Sized, P: ?Sized> {
    env: &'a E,
    features: &'a L,
    policy_features: &'a P,
    schedule: &'a GraphSchedule,
    config: AlgorithmConfig,
    weights: Vec<WeightMatrix>,
    radius_omega: f64,
    radius_lambda: f64,
}

impl<'a, E, L, P> Learner<'a, E, L, P>
where
    E: Environment,
    L: LinearFeatures<E::State> + ?Sized,
    P: PolicyFeatures<E::State> + ?Sized,
{
    /// Validates every component and fails before any iteration runs.
    pub fn new(
        env: &'a E,
        features: &'a L,
        policy_features: &'a P,
        schedule: &'a GraphSchedule,
        config: AlgorithmConfig,
    ) -> Result<Self> {
        let n = env.n_agents();
        config.stepsizes.validate()?;
        if let Variant::Mdac { batch: 0 } = config.variant {
            return Err(CacError::InvalidModel("MDAC batch size must be at least 1".into()));
        }
        if config.variant.requires_personal_only() && policy_features.shared_dim() > 0 {
            return Err(CacError::SharingNotAllowed {
                variant: config.variant.to_string(),
                shared_dim: policy_features.shared_dim(),
            });
        }
        if policy_features.n_agents() != n {
            return Err(CacError::Dimension {
                context: "policy feature agents",
                expected: n,
                actual: policy_features.n_agents(),
            });
        }
        for (i, &c) in env.action_counts().iter().enumerate() {
            if policy_features.n_actions(i) != c {
                return Err(CacError::Dimension {
                    context: "policy feature actions",
                    expected: c,
                    actual: policy_features.n_actions(i),
                });
            }
        }
        if schedule.n_agents() != n {
            return Err(CacError::Dimension {
                context: "schedule agents",
                expected: n,
                actual: schedule.n_agents(),
            });
        }
        if config.sampling == SamplingMode::Exact && env.as_finite().is_none() {
            return Err(CacError::ExactSamplingUnsupported);
        }
        let weights = schedule.weight_cycle(config.weight_rule);
        for (t, w) in weights.iter().enumerate() {
            w.validate(&schedule.edges_at(t), t)?;
        }
        if config.variant != Variant::Iac {
            let window = schedule.window();
            verify_connectivity(schedule, window, config.horizon.max(window)).into_result()?;
        }
        let default_radius = CriticState::default_radius(env.reward_bound(), env.discount());
        let radius_omega = config.radius_omega.unwrap_or(default_radius);
        let radius_lambda = config.radius_lambda.unwrap_or(default_radius);
        for r in [radius_omega, radius_lambda] {
            if !(r > 0.0) {
                return Err(CacError::InvalidRadius(r));
            }
        }
        Ok(Self {
            env,
            features,
            policy_features,
            schedule,
            config,
            weights,
            radius_omega,
            radius_lambda,
        })
    }

    /// Replaces the rule-generated weights with explicit matrices, one per
    /// phase of the schedule's cycle.
    pub fn with_weights(mut self, weights: Vec<WeightMatrix>) -> Result<Self> {
        let cycle = self.schedule.cycle_len();
        if weights.len() != cycle {
            return Err(CacError::Dimension {
                context: "weight matrices per schedule cycle",
                expected: cycle,
                actual: weights.len(),
            });
        }
        for (t, w) in weights.iter().enumerate() {
            if w.n_agents() != self.env.n_agents() {
                return Err(CacError::Dimension {
                    context: "weight matrix agents",
                    expected: self.env.n_agents(),
                    actual: w.n_agents(),
                });
            }
            w.validate(&self.schedule.edges_at(t), t)?;
        }
        self.weights = weights;
        Ok(self)
    }

    pub fn weights(&self) -> &[WeightMatrix] {
        &self.weights
    }

    pub fn config(&self) -> &AlgorithmConfig {
        &self.config
    }

    pub fn schedule(&self) -> &GraphSchedule {
        self.schedule
    }

    pub fn radii(&self) -> (f64, f64) {
        (self.radius_omega, self.radius_lambda)
    }

    pub fn rates(&self) -> (f64, f64, f64) {
        self.config.stepsizes.rates(self.config.horizon)
    }

    pub fn init(&self, seed: u64) -> Result<RunState<E::State>> {
        let n = self.env.n_agents();
        let mut init_rng = stream(seed, Stream::Init);
        let policy = PolicyParams::gaussian(self.policy_features, n, self.config.policy_init_std, &mut init_rng);
        let mut critic = CriticState::zeros(
            n,
            self.features.value_dim(),
            self.features.reward_dim(),
            self.radius_omega,
            self.radius_lambda,
        )?;
        if self.config.critic_init_std > 0.0 {
            let normal = Normal::new(0.0, self.config.critic_init_std)
                .map_err(|e| CacError::InvalidModel(format!("critic init: {e}")))?;
            critic.omega.iter_mut().for_each(|v| *v = normal.sample(&mut init_rng));
            critic.lambda.iter_mut().for_each(|v| *v = normal.sample(&mut init_rng));
            project_rows(&mut critic.omega, self.radius_omega)?;
            project_rows(&mut critic.lambda, self.radius_lambda)?;
        }
        let mut rngs = RunRngs::new(seed);
        let current_state = self.env.initial_state(&mut rngs.sampling);
        Ok(RunState {
            policy,
            critic,
            current_state,
            iteration: 0,
            rngs,
            reward_sum: 0.0,
            stationary_cache: None,
        })
    }

    fn sample_critic(&self, st: &mut RunState<E::State>) -> Result<Transition<E::State>> {
        let state = match self.config.sampling {
            SamplingMode::Chain => st.current_state.clone(),
            SamplingMode::Exact => {
                let fresh = match &st.stationary_cache {
                    Some((params, _)) => params != &st.policy,
                    None => true,
                };
                if fresh {
                    let mu = stationary_for(self.env, self.policy_features, &st.policy)?;
                    st.stationary_cache = Some((st.policy.clone(), mu));
                }
                let mu = &st.stationary_cache.as_ref().expect("cache filled").1;
                let idx = sample_categorical(mu, &mut st.rngs.sampling);
                self.env
                    .state_from_index(idx)
                    .ok_or(CacError::ExactSamplingUnsupported)?
            }
        };
        let policy = SoftmaxPolicy::new(self.policy_features, &st.policy);
        let action = policy.sample_joint_action(&state, &mut st.rngs.sampling);
        let tr = self
            .env
            .step(&state, &action, &mut st.rngs.sampling, &mut st.rngs.noise);
        st.current_state = tr.next_state.clone();
        Ok(tr)
    }

    fn sample_actor(&self, st: &mut RunState<E::State>) -> Transition<E::State> {
        let policy = SoftmaxPolicy::new(self.policy_features, &st.policy);
        let state = sample_visitation(self.env, &policy, &mut st.rngs.actor, &mut st.rngs.noise);
        let action = policy.sample_joint_action(&state, &mut st.rngs.actor);
        self.env
            .step(&state, &action, &mut st.rngs.actor, &mut st.rngs.noise)
    }

    /// One outer iteration. Returns the noise-free team reward of the
    /// critic sample(s), averaged over the MDAC batch.
    pub fn step(&self, st: &mut RunState<E::State>) -> Result<f64> {
        let n = self.env.n_agents();
        let gamma = self.env.discount();
        let (alpha, beta, zeta) = self.rates();
        let variant = self.config.variant;
        let w = &self.weights[st.iteration % self.weights.len()];

        let mix = |x: &DMatrix<f64>| -> Result<DMatrix<f64>> {
            if variant == Variant::Iac {
                Ok(x.clone())
            } else {
                consensus_apply(w, x)
            }
        };
        let mut omega_base = mix(&st.critic.omega)?;
        let mut lambda_base = mix(&st.critic.lambda)?;
        let shared_mixed = mix(&st.policy.shared)?;

        let mut omega_pre = st.critic.omega.clone();
        let mut lambda_pre = st.critic.lambda.clone();
        let mut reward_total = 0.0;
        let batch = variant.batch();
        let mut last = None;
        for k in 0..batch {
            let x = self.sample_critic(st)?;
            reward_total += x.mean_reward;
            let mut omega_next = omega_base.clone();
            let mut lambda_next = lambda_base.clone();
            for i in 0..n {
                let omega_i: Vec<f64> = omega_pre.row(i).iter().copied().collect();
                let lambda_i: Vec<f64> = lambda_pre.row(i).iter().copied().collect();
                let r = x.rewards[i];
                let dw = critic_increment(self.features, &omega_i, &x, r, gamma);
                let dl = reward_increment(self.features, &lambda_i, &x, r);
                update_row(&mut omega_next, i, &dw, beta, self.radius_omega)?;
                update_row(&mut lambda_next, i, &dl, zeta, self.radius_lambda)?;
            }
            if k + 1 == batch {
                last = Some((x, omega_pre.clone(), lambda_pre.clone()));
            }
            omega_pre = omega_next.clone();
            lambda_pre = lambda_next.clone();
            omega_base = omega_next;
            lambda_base = lambda_next;
        }
        let (critic_sample, omega_actor, lambda_actor) = last.expect("batch is at least 1");
        let actor_sample = if self.config.double_sampling {
            self.sample_actor(st)
        } else {
            critic_sample
        };

        let mut new_policy = PolicyParams {
            shared: shared_mixed,
            personal: st.policy.personal.clone(),
        };
        if alpha != 0.0 {
            let policy = SoftmaxPolicy::new(self.policy_features, &st.policy);
            for i in 0..n {
                let omega_i: Vec<f64> = omega_actor.row(i).iter().copied().collect();
                let lambda_i: Vec<f64> = lambda_actor.row(i).iter().copied().collect();
                let step = if variant == Variant::Iac {
                    let delta = td_error(self.features, &omega_i, &actor_sample, actor_sample.rewards[i], gamma);
                    scaled_score(&policy, i, &actor_sample, delta)
                } else {
                    actor_increment(self.features, &policy, i, &omega_i, &lambda_i, &actor_sample, gamma)
                };
                for (k, g) in step.shared.iter().enumerate() {
                    new_policy.shared[(i, k)] += alpha * g;
                }
                for (k, g) in step.personal.iter().enumerate() {
                    new_policy.personal[i][k] += alpha * g;
                }
            }
        }

        st.critic.omega = omega_pre;
        st.critic.lambda = lambda_pre;
        st.policy = new_policy;
        st.iteration += 1;
        let instant = reward_total / batch as f64;
        st.reward_sum += instant;
        Ok(instant)
    }

    /// `T` iterations from a fresh state seeded by `seed`.
    pub fn run(&self, seed: u64, oracle: Option<&dyn OracleHook>) -> Result<RunOutcome<E::State>> {
        let st = self.init(seed)?;
        self.run_from(st, oracle)
    }

    pub fn run_from(
        &self,
        mut st: RunState<E::State>,
        oracle: Option<&dyn OracleHook>,
    ) -> Result<RunOutcome<E::State>> {
        let stride = self.config.stride();
        let horizon = self.config.horizon;
        let mut records = Vec::with_capacity(horizon / stride + 1);
        let mut cached: Option<(PolicyParams, OracleTargets)> = None;
        for t in 0..horizon {
            let snapshot = if t % stride == 0 {
                let mut rec = MetricsRecord {
                    iteration: t,
                    instant_reward: 0.0,
                    running_avg_reward: 0.0,
                    consensus_theta: disagreement_norm_sq(&st.policy.shared),
                    consensus_omega: disagreement_norm_sq(&st.critic.omega),
                    consensus_lambda: disagreement_norm_sq(&st.critic.lambda),
                    critic_gap: None,
                    reward_gap: None,
                    grad_shared: None,
                    grad_personal: None,
                    eps_app: None,
                    tv_mismatch: None,
                };
                if let Some(hook) = oracle {
                    let stale = cached.as_ref().map_or(true, |(p, _)| p != &st.policy);
                    if stale {
                        cached = Some((st.policy.clone(), hook.targets(&st.policy)?));
                    }
                    let targets = &cached.as_ref().expect("cache filled").1;
                    rec.critic_gap = Some(row_gap(&st.critic.omega, &targets.omega_star));
                    rec.reward_gap = Some(row_gap(&st.critic.lambda, &targets.lambda_star));
                    rec.grad_shared = Some(targets.gradient.shared_consensus_norm_sq());
                    rec.grad_personal = Some(targets.gradient.personal_norm_sq());
                    rec.eps_app = Some(targets.eps_app);
                    rec.tv_mismatch = Some(targets.tv_mismatch);
                }
                Some(rec)
            } else {
                None
            };
            let instant = self.step(&mut st)?;
            if let Some(mut rec) = snapshot {
                rec.instant_reward = instant;
                rec.running_avg_reward = st.reward_sum / st.iteration as f64;
                records.push(rec);
            }
        }
        Ok(RunOutcome {
            records,
            final_state: st,
        })
    }
}

fn update_row(m: &mut DMatrix<f64>, row: usize, inc: &[f64], rate: f64, radius: f64) -> Result<()> {
    let mut v: Vec<f64> = m.row(row).iter().zip(inc).map(|(a, g)| a + rate * g).collect();
    project_in_place(&mut v, radius)?;
    for (k, x) in v.into_iter().enumerate() {
        m[(row, k)] = x;
    }
    Ok(())
}

fn project_rows(m: &mut DMatrix<f64>, radius: f64) -> Result<()> {
    for i in 0..m.nrows() {
        let mut v: Vec<f64> = m.row(i).iter().copied().collect();
        project_in_place(&mut v, radius)?;
        for (k, x) in v.into_iter().enumerate() {
            m[(i, k)] = x;
        }
    }
    Ok(())
}

/// `sum_i || row_i - target ||^2`.
pub fn row_gap(m: &DMatrix<f64>, target: &DVector<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| {
            m.row(i)
                .iter()
                .zip(target.iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        })
        .sum()
}
