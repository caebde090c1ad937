//! Coordinated actor-critic (CAC) for decentralized multi-agent reinforcement
//! learning over time-varying communication graphs.
//!
//! Agents hold linear critics (value weights `omega`, reward weights `lambda`)
//! and softmax policies whose parameters split into a block that is averaged
//! with neighbours and a block kept private. Every iteration mixes the
//! shared quantities with a doubly stochastic weight matrix and then takes
//! local TD / regression / policy-gradient steps.
//!
//! Small finite models can be solved exactly by [`oracle`], which is what the
//! tests use to check the learners against stationary distributions, TD
//! fixed points and exact policy gradients.

pub mod algorithm;
pub mod envs;
pub mod error;
pub mod features;
pub mod mdp;
pub mod montecarlo;
pub mod network;
pub mod oracle;
pub mod policy;
pub mod rng;

pub use algorithm::{
    AlgorithmConfig, Learner, MetricsRecord, RunOutcome, RunState, SamplingMode, StepsizeSchedule,
    Stepsizes, Variant,
};
pub use error::{CacError, Result};
pub use features::{CriticState, FeatureMap, FeatureMatrix, LinearFeatures};
pub use mdp::{Environment, JointAction, MultiAgentMdp, Transition, TransitionSample};
pub use network::{BoundConstants, GraphSchedule, WeightMatrix, WeightRule};
pub use oracle::OracleSolution;
pub use policy::{PolicyFeatures, PolicyParams, SoftmaxPolicy};
