//! Checks every standing assumption of the analysis before a run and names
//! the offending object when one fails.

use std::fmt;

use cac_core::error::CacError;
use cac_core::features::{FeatureMatrix, LinearFeatures};
use cac_core::mdp::{Environment, JointAction, MultiAgentMdp};
use cac_core::network::verify_connectivity;
use cac_core::oracle::{check_irreducible, period};
use cac_core::rng::{stream, Stream};
use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::model::{Model, RunPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    Connectivity,
    Weights,
    RewardBound,
    Features,
    Irreducibility,
}

impl CheckKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::Connectivity => "network connectivity",
            Self::Weights => "weight matrices",
            Self::RewardBound => "bounded reward",
            Self::Features => "function approximation",
            Self::Irreducibility => "irreducible and aperiodic chain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub kind: CheckKind,
    pub status: Status,
    /// What was verified, or the witness of the violation.
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreflightReport {
    pub checks: Vec<Check>,
}

impl PreflightReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }

    pub fn get(&self, kind: CheckKind) -> &Check {
        self.checks
            .iter()
            .find(|c| c.kind == kind)
            .expect("every check kind is reported")
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| c.status == Status::Fail)
    }
}

impl fmt::Display for PreflightReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = match c.status {
                Status::Pass => "PASS",
                Status::Fail => "FAIL",
                Status::Skipped => "SKIP",
            };
            writeln!(f, "[{tag}] {}: {}", c.kind.label(), c.detail)?;
        }
        write!(f, "preflight {}", if self.passed() { "passed" } else { "FAILED" })
    }
}

/// Error carrying a failed report, so callers can inspect the witnesses.
#[derive(Debug, Clone)]
pub struct PreflightFailed(pub PreflightReport);

impl fmt::Display for PreflightFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "assumption preflight failed; nothing was run")?;
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for PreflightFailed {}

fn check(kind: CheckKind, status: Status, detail: impl Into<String>) -> Check {
    Check {
        kind,
        status,
        detail: detail.into(),
    }
}

pub fn preflight(cfg: &ExperimentConfig, model: &Model, plan: &RunPlan) -> PreflightReport {
    PreflightReport {
        checks: vec![
            connectivity(cfg, plan),
            weights(cfg, plan),
            reward_bound(cfg, model),
            features(model),
            irreducibility(model),
        ],
    }
}

fn connectivity(cfg: &ExperimentConfig, plan: &RunPlan) -> Check {
    let window = plan.schedule.window();
    let report = verify_connectivity(&plan.schedule, window, cfg.horizon.max(window));
    match report.first_failure {
        None => check(
            CheckKind::Connectivity,
            Status::Pass,
            format!(
                "every {window}-step window has a connected union graph ({} distinct window(s) checked)",
                report.windows_checked
            ),
        ),
        Some((start, end)) => check(
            CheckKind::Connectivity,
            Status::Fail,
            format!("union graph over iterations [{start}, {end}] is disconnected"),
        ),
    }
}

fn weights(cfg: &ExperimentConfig, plan: &RunPlan) -> Check {
    let cycle = plan.weight_cycle(cfg);
    if cycle.len() != plan.schedule.cycle_len() {
        return check(
            CheckKind::Weights,
            Status::Fail,
            format!(
                "{} weight matrices given for a schedule cycle of {}",
                cycle.len(),
                plan.schedule.cycle_len()
            ),
        );
    }
    let n = plan.schedule.n_agents();
    for (t, w) in cycle.iter().enumerate() {
        if w.n_agents() != n {
            return check(CheckKind::Weights, Status::Fail, format!("matrix at t={t} is not {n}x{n}"));
        }
        if let Err(CacError::WeightMatrix { t, reason }) = w.validate(&plan.schedule.edges_at(t), t) {
            return check(CheckKind::Weights, Status::Fail, format!("matrix at t={t}: {reason}"));
        }
    }
    let floor = cycle.iter().map(|w| w.positivity_floor).fold(f64::INFINITY, f64::min);
    check(
        CheckKind::Weights,
        Status::Pass,
        format!("{} matrices doubly stochastic with positivity floor c = {floor}", cycle.len()),
    )
}

fn reward_witness(mdp: &MultiAgentMdp, bound: f64) -> Option<String> {
    let nj = mdp.n_joint_actions();
    for i in 0..mdp.n_agents() {
        for s in 0..mdp.n_states() {
            for j in 0..nj {
                let r = mdp.reward(i, s, j);
                if r.abs() > bound {
                    let a = JointAction::decode(j, mdp.action_counts());
                    return Some(format!(
                        "agent {i}, state {s}, joint action {:?}: |r| = {} exceeds R_max = {bound}",
                        a.actions(),
                        r.abs()
                    ));
                }
            }
        }
    }
    None
}

fn reward_bound(cfg: &ExperimentConfig, model: &Model) -> Check {
    let natural = model.natural_reward_bound();
    let bound = cfg.reward_bound.unwrap_or(natural);
    let witness = match model {
        Model::Coordination { game, .. } => reward_witness(game.mdp(), bound),
        Model::Finite { mdp, .. } => reward_witness(mdp, bound),
        Model::Pursuit { grid, .. } => {
            let c = grid.config();
            if c.capture_reward.abs() > bound {
                Some(format!("capture reward {} exceeds R_max = {bound}", c.capture_reward))
            } else if c.encounter_reward.abs() > bound {
                Some(format!("encounter reward {} exceeds R_max = {bound}", c.encounter_reward))
            } else {
                None
            }
        }
    };
    let noisy = matches!(model, Model::Coordination { game, .. } if game.noise());
    match witness {
        Some(w) => check(CheckKind::RewardBound, Status::Fail, w),
        None => {
            let mut detail = format!("all rewards within R_max = {bound}");
            if noisy {
                detail.push_str(" (deterministic part; Gumbel noise is unbounded)");
            }
            check(CheckKind::RewardBound, Status::Pass, detail)
        }
    }
}

/// Norm and rank checks on a stack of feature rows.
fn matrix_checks(which: &str, m: &FeatureMatrix, label: impl Fn(usize) -> String) -> Option<String> {
    if let Some((row, norm)) = m.norm_violation() {
        return Some(format!("{which} features of {} have norm {norm} > 1", label(row)));
    }
    if !m.has_full_column_rank() {
        let (lo, hi) = m.singular_range();
        return Some(format!(
            "{which} feature matrix lacks full column rank (singular values in [{lo:e}, {hi:e}])"
        ));
    }
    None
}

const PURSUIT_FEATURE_SAMPLES: usize = 2000;

fn features(model: &Model) -> Check {
    let fail = |w: String| check(CheckKind::Features, Status::Fail, w);
    match model {
        Model::Coordination { features, .. } | Model::Finite { features, .. } => {
            let nj = features.n_joint_actions();
            if let Some(w) = matrix_checks("value", features.value_matrix(), |s| format!("state {s}")) {
                return fail(w);
            }
            if let Some(w) = matrix_checks("reward", features.reward_matrix(), |r| {
                format!("state {}, joint action {}", r / nj, r % nj)
            }) {
                return fail(w);
            }
            check(
                CheckKind::Features,
                Status::Pass,
                format!(
                    "value ({} columns) and reward ({} columns) features have norm <= 1 and full column rank",
                    features.value_matrix().cols(),
                    features.reward_matrix().cols()
                ),
            )
        }
        Model::Pursuit { grid, features, .. } => {
            // The state space is far too large to enumerate; check a random
            // rollout instead.
            let mut rng = stream(0, Stream::Environment);
            let mut noise = stream(0, Stream::Noise);
            let n = grid.n_agents();
            let mut state = grid.initial_state(&mut rng);
            let mut value = DMatrix::zeros(PURSUIT_FEATURE_SAMPLES, features.value_dim());
            let mut phi = vec![0.0; features.value_dim()];
            let mut psi = vec![0.0; features.reward_dim()];
            for r in 0..PURSUIT_FEATURE_SAMPLES {
                // restart often so that the samples cover the grid
                if r % 10 == 0 {
                    state = grid.initial_state(&mut rng);
                }
                features.value_features(&state, &mut phi);
                value.set_row(r, &nalgebra::RowDVector::from_row_slice(&phi));
                let a = JointAction::new((0..n).map(|_| rng.random_range(0..grid.action_counts()[0])).collect());
                features.reward_features(&state, &a, &mut psi);
                let norm = psi.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1.0 + 1e-12 {
                    return fail(format!("reward features of sampled state {state:?} have norm {norm} > 1"));
                }
                state = grid.step(&state, &a, &mut rng, &mut noise).next_state;
            }
            if let Some(w) = matrix_checks("value", &FeatureMatrix::Dense(value), |r| format!("sample {r}")) {
                return fail(w);
            }
            check(
                CheckKind::Features,
                Status::Pass,
                format!(
                    "value features have norm <= 1 and full column rank on {PURSUIT_FEATURE_SAMPLES} sampled states; \
                     reward features are capture and encounter fractions scaled to norm <= 1"
                ),
            )
        }
    }
}

fn irreducibility(model: &Model) -> Check {
    let Some((mdp, _, _)) = model.finite_parts() else {
        return check(
            CheckKind::Irreducibility,
            Status::Skipped,
            "state space too large to enumerate",
        );
    };
    // Softmax policies put mass on every action, so the support of the
    // induced chain does not depend on the parameters.
    let uniform: Vec<Vec<f64>> = (0..mdp.n_states())
        .map(|_| vec![1.0 / mdp.n_joint_actions() as f64; mdp.n_joint_actions()])
        .collect();
    let (chain, _) = mdp.induced_chain(&uniform);
    match check_irreducible(&chain) {
        Err(CacError::Reducible { from, unreachable }) => check(
            CheckKind::Irreducibility,
            Status::Fail,
            format!("state {unreachable} is unreachable from state {from}"),
        ),
        Err(e) => check(CheckKind::Irreducibility, Status::Fail, e.to_string()),
        Ok(()) => {
            let d = period(&chain);
            if d > 1 {
                check(
                    CheckKind::Irreducibility,
                    Status::Fail,
                    format!("chain is periodic with period {d}"),
                )
            } else {
                check(
                    CheckKind::Irreducibility,
                    Status::Pass,
                    format!("induced chain on {} states is irreducible and aperiodic", mdp.n_states()),
                )
            }
        }
    }
}
