//! Turns a configuration into concrete environments, features, schedules
//! and learners, and runs one `(variant, seed)` job.

use anyhow::{bail, Context, Result};
use cac_core::algorithm::{
    AlgorithmConfig, FiniteOracle, Learner, MetricsRecord, OracleHook, Variant,
};
use cac_core::envs::{CoordinationGame, PursuitGrid, PursuitPolicyFeatures, PursuitValueFeatures};
use cac_core::features::{FeatureMap, FeatureMatrix, LinearFeatures};
use cac_core::mdp::{Environment, MultiAgentMdp};
use cac_core::network::{
    complete_edges, path_edges, ring_edges, GraphSchedule, WeightMatrix,
};
use cac_core::policy::{PersonalizedView, PolicyFeatures, PolicyParams, SoftmaxPolicy, TablePolicyFeatures};
use cac_core::rng::{stream, Stream};
use cac_core::OracleSolution;
use cac_core::CriticState;
use nalgebra::DMatrix;

use crate::config::{EnvironmentSpec, ExperimentConfig, FiniteSpec, GraphKind, GraphSpec, Topology};

pub enum Model {
    Coordination {
        game: CoordinationGame,
        features: FeatureMap,
        policy: TablePolicyFeatures,
        oracle_mdp: MultiAgentMdp,
    },
    Finite {
        mdp: MultiAgentMdp,
        features: FeatureMap,
        policy: TablePolicyFeatures,
    },
    Pursuit {
        grid: PursuitGrid,
        features: PursuitValueFeatures,
        policy: PursuitPolicyFeatures,
    },
}

/// Result of one `(variant, seed)` run.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    /// Team reward averaged over all `T` iterations.
    pub final_running_avg: f64,
}

fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn dense(rows: &[Vec<f64>], what: &str) -> Result<FeatureMatrix> {
    let n = rows.len();
    let k = rows.first().map_or(0, Vec::len);
    if n == 0 || k == 0 || rows.iter().any(|r| r.len() != k) {
        bail!("{what} must be a non-empty list of equally long rows");
    }
    Ok(FeatureMatrix::Dense(DMatrix::from_fn(n, k, |i, j| rows[i][j])))
}

/// Builds the model without feature checks, so that the preflight can
/// report bad features instead of failing on them.
pub fn finite_from_spec(spec: &FiniteSpec) -> Result<(MultiAgentMdp, FeatureMap)> {
    let initial = spec
        .initial
        .clone()
        .unwrap_or_else(|| vec![1.0 / spec.n_states as f64; spec.n_states]);
    let bound = max_abs(&spec.rewards).max(f64::MIN_POSITIVE);
    let mdp = MultiAgentMdp::new(
        spec.n_states,
        spec.action_counts.clone(),
        spec.transition.clone(),
        spec.rewards.clone(),
        initial,
        spec.discount,
        bound,
    )?;
    let value = match &spec.value_features {
        Some(rows) => dense(rows, "value_features")?,
        None => FeatureMatrix::Identity(spec.n_states),
    };
    let reward = match &spec.reward_features {
        Some(rows) => dense(rows, "reward_features")?,
        None => FeatureMatrix::Identity(spec.n_states * mdp.n_joint_actions()),
    };
    let features = FeatureMap::from_parts(value, reward, spec.n_states, spec.action_counts.clone())?;
    Ok((mdp, features))
}

impl Model {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let sharing = cfg.policy.sharing;
        Ok(match &cfg.environment {
            EnvironmentSpec::Coordination {
                n_agents,
                noise,
                discount,
            } => {
                let game = CoordinationGame::new(*n_agents, *noise, *discount)?;
                Self::Coordination {
                    features: game.features(),
                    policy: game.policy_features(sharing),
                    oracle_mdp: game.oracle_mdp(),
                    game,
                }
            }
            EnvironmentSpec::Random {
                n_states,
                action_counts,
                discount,
                seed,
            } => {
                let mut rng = cac_core::rng::stream(*seed, cac_core::rng::Stream::Environment);
                let mdp = MultiAgentMdp::random(*n_states, action_counts.clone(), *discount, &mut rng)?;
                Self::Finite {
                    features: FeatureMap::tabular(&mdp),
                    policy: TablePolicyFeatures::one_hot(*n_states, action_counts, sharing),
                    mdp,
                }
            }
            EnvironmentSpec::Finite(spec) => {
                let (mdp, features) = finite_from_spec(spec)?;
                Self::Finite {
                    policy: TablePolicyFeatures::one_hot(spec.n_states, &spec.action_counts, sharing),
                    mdp,
                    features,
                }
            }
            EnvironmentSpec::Pursuit(pc) => {
                let grid = PursuitGrid::new(pc.clone())?;
                Self::Pursuit {
                    features: PursuitValueFeatures::new(&grid),
                    policy: PursuitPolicyFeatures::new(&grid, sharing),
                    grid,
                }
            }
        })
    }

    pub fn n_agents(&self) -> usize {
        match self {
            Self::Coordination { game, .. } => game.n_agents(),
            Self::Finite { mdp, .. } => Environment::n_agents(mdp),
            Self::Pursuit { grid, .. } => grid.n_agents(),
        }
    }

    pub fn discount(&self) -> f64 {
        match self {
            Self::Coordination { game, .. } => game.discount(),
            Self::Finite { mdp, .. } => mdp.discount(),
            Self::Pursuit { grid, .. } => grid.discount(),
        }
    }

    /// Largest reward magnitude the environment can emit (noise excluded).
    pub fn natural_reward_bound(&self) -> f64 {
        match self {
            Self::Coordination { game, .. } => game.reward_bound(),
            Self::Finite { mdp, .. } => mdp.reward_bound(),
            Self::Pursuit { grid, .. } => grid.reward_bound(),
        }
    }

    /// Model, features and policy features the oracle works with.
    pub fn finite_parts(&self) -> Option<(&MultiAgentMdp, &FeatureMap, &TablePolicyFeatures)> {
        match self {
            Self::Coordination {
                oracle_mdp,
                features,
                policy,
                ..
            } => Some((oracle_mdp, features, policy)),
            Self::Finite {
                mdp,
                features,
                policy,
            } => Some((mdp, features, policy)),
            Self::Pursuit { .. } => None,
        }
    }

    /// Runs `variant` for one seed.
    pub fn run(&self, cfg: &ExperimentConfig, plan: &RunPlan, variant: Variant, seed: u64) -> Result<SeedRun> {
        match self {
            Self::Coordination { game, features, policy, oracle_mdp } => {
                with_hooks(cfg.oracle, oracle_mdp, features, policy, |hooks| {
                    simulate(game, features, policy, hooks, cfg, plan, variant, seed)
                })
            }
            Self::Finite { mdp, features, policy } => {
                with_hooks(cfg.oracle, mdp, features, policy, |hooks| {
                    simulate(mdp, features, policy, hooks, cfg, plan, variant, seed)
                })
            }
            Self::Pursuit { grid, features, policy } => {
                simulate(grid, features, policy, None, cfg, plan, variant, seed)
            }
        }
    }
}

/// Oracle hooks for the configured policy features and for their
/// personalized view, in that order.
type Hooks<'h> = Option<(&'h dyn OracleHook, &'h dyn OracleHook)>;

fn with_hooks<T>(
    enabled: bool,
    mdp: &MultiAgentMdp,
    features: &FeatureMap,
    policy: &TablePolicyFeatures,
    f: impl FnOnce(Hooks<'_>) -> T,
) -> T {
    if !enabled {
        return f(None);
    }
    let view = PersonalizedView::new(policy);
    let full = FiniteOracle {
        mdp,
        features,
        policy_features: policy,
    };
    let personal = FiniteOracle {
        mdp,
        features,
        policy_features: &view,
    };
    f(Some((&full, &personal)))
}

/// Per-experiment settings shared by every job.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub schedule: GraphSchedule,
    pub weights: Option<Vec<WeightMatrix>>,
    pub radius_omega: f64,
    pub radius_lambda: f64,
}

impl RunPlan {
    pub fn new(cfg: &ExperimentConfig, model: &Model) -> Result<Self> {
        let schedule = build_schedule(&cfg.graph, model.n_agents())?;
        let weights = explicit_weights(&cfg.graph, model.n_agents())?;
        let bound = cfg.reward_bound.unwrap_or_else(|| model.natural_reward_bound());
        let default = CriticState::default_radius(bound, model.discount());
        Ok(Self {
            schedule,
            weights,
            radius_omega: cfg.critic.radius_omega.unwrap_or(default),
            radius_lambda: cfg.critic.radius_lambda.unwrap_or(default),
        })
    }

    /// Weights each phase actually uses.
    pub fn weight_cycle(&self, cfg: &ExperimentConfig) -> Vec<WeightMatrix> {
        self.weights
            .clone()
            .unwrap_or_else(|| self.schedule.weight_cycle(cfg.weight_rule))
    }
}

pub fn algorithm_config(cfg: &ExperimentConfig, plan: &RunPlan, variant: Variant) -> Result<AlgorithmConfig> {
    let mut ac = AlgorithmConfig::new(variant, cfg.stepsizes.build()?, cfg.horizon);
    ac.sampling = cfg.sampling.0;
    ac.double_sampling = cfg.double_sampling;
    ac.weight_rule = cfg.weight_rule;
    ac.metrics_stride = cfg.metrics_stride;
    ac.policy_init_std = cfg.policy.init_std;
    ac.critic_init_std = cfg.critic.init_std;
    ac.radius_omega = Some(plan.radius_omega);
    ac.radius_lambda = Some(plan.radius_lambda);
    Ok(ac)
}

#[allow(clippy::too_many_arguments)]
fn simulate<E, L, P>(
    env: &E,
    features: &L,
    policy: &P,
    hooks: Hooks<'_>,
    cfg: &ExperimentConfig,
    plan: &RunPlan,
    variant: Variant,
    seed: u64,
) -> Result<SeedRun>
where
    E: Environment,
    L: LinearFeatures<E::State> + ?Sized,
    P: PolicyFeatures<E::State> + ?Sized,
{
    let ac = algorithm_config(cfg, plan, variant)?;
    if variant.requires_personal_only() {
        let view = PersonalizedView::new(policy);
        run_learner(env, features, &view, hooks.map(|h| h.1), ac, plan, seed)
    } else {
        run_learner(env, features, policy, hooks.map(|h| h.0), ac, plan, seed)
    }
}

fn run_learner<E, L, P>(
    env: &E,
    features: &L,
    policy: &P,
    oracle: Option<&dyn OracleHook>,
    ac: AlgorithmConfig,
    plan: &RunPlan,
    seed: u64,
) -> Result<SeedRun>
where
    E: Environment,
    L: LinearFeatures<E::State> + ?Sized,
    P: PolicyFeatures<E::State> + ?Sized,
{
    let horizon = ac.horizon;
    let mut learner = Learner::new(env, features, policy, &plan.schedule, ac)?;
    if let Some(w) = &plan.weights {
        learner = learner.with_weights(w.clone())?;
    }
    let out = learner
        .run(seed, oracle)
        .with_context(|| format!("run with seed {seed}"))?;
    let final_running_avg = if horizon == 0 {
        0.0
    } else {
        out.final_state.reward_sum / horizon as f64
    };
    Ok(SeedRun {
        seed,
        records: out.records,
        final_running_avg,
    })
}

pub fn build_schedule(spec: &GraphSpec, n_agents: usize) -> Result<GraphSchedule> {
    let schedule = match &spec.kind {
        GraphKind::Static { topology, edges } => {
            let edges = match (topology, edges) {
                (Some(_), Some(_)) => bail!("give either graph.topology or graph.edges, not both"),
                (None, Some(e)) => e.clone(),
                (Some(Topology::Complete), None) => complete_edges(n_agents),
                (Some(Topology::Ring), None) => ring_edges(n_agents),
                (Some(Topology::Path), None) => path_edges(n_agents),
                (Some(Topology::Empty), None) => vec![],
                (None, None) => bail!("static graph needs graph.topology or graph.edges"),
            };
            GraphSchedule::fixed(n_agents, &edges)?
        }
        GraphKind::Federated { period } => GraphSchedule::federated(n_agents, *period)?,
        GraphKind::Alternating => GraphSchedule::alternating(n_agents)?,
        GraphKind::Custom { edge_sets } => GraphSchedule::custom(n_agents, edge_sets.clone())?,
    };
    Ok(match spec.window {
        Some(0) => bail!("graph.window must be at least 1"),
        Some(w) => schedule.with_window(w),
        None => schedule,
    })
}

pub fn explicit_weights(spec: &GraphSpec, n_agents: usize) -> Result<Option<Vec<WeightMatrix>>> {
    let Some(mats) = &spec.weights else {
        return Ok(None);
    };
    mats.iter()
        .enumerate()
        .map(|(t, rows)| {
            if rows.len() != n_agents || rows.iter().any(|r| r.len() != n_agents) {
                bail!("graph.weights[{t}] must be {n_agents}x{n_agents}");
            }
            Ok(WeightMatrix::from_entries(DMatrix::from_fn(n_agents, n_agents, |i, j| rows[i][j])))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Exact oracle quantities of a finite model at `params`, or at the
/// initial policy of `seed` when `params` is `None`.
pub fn oracle_at(cfg: &ExperimentConfig, model: &Model, params: Option<PolicyParams>, seed: u64) -> Result<OracleSolution> {
    let (mdp, features, policy) = model
        .finite_parts()
        .context("the exact oracle needs a finite environment")?;
    let params = match params {
        Some(p) => p,
        None => {
            let mut rng = stream(seed, Stream::Init);
            PolicyParams::gaussian(policy, model.n_agents(), cfg.policy.init_std, &mut rng)
        }
    };
    if params.shared.nrows() != model.n_agents() || params.shared.ncols() != policy.shared_dim() {
        bail!(
            "shared parameters must be {}x{}, got {}x{}",
            model.n_agents(),
            policy.shared_dim(),
            params.shared.nrows(),
            params.shared.ncols()
        );
    }
    for (i, p) in params.personal.iter().enumerate() {
        if p.len() != policy.personal_dim(i) {
            bail!("personal parameters of agent {i} must have length {}", policy.personal_dim(i));
        }
    }
    if params.personal.len() != model.n_agents() {
        bail!("expected personal parameters for {} agents", model.n_agents());
    }
    let soft = SoftmaxPolicy::new(policy, &params);
    Ok(OracleSolution::compute(mdp, &soft, features)?)
}
